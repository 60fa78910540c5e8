"""
Tests for the optimizer, minibatching, training loop, evaluation and timing.
"""

import json
import os

import numpy as np
import pytest
from scipy import integrate

from conftest import check_param_gradients
from dtgp.core import autodiff as ad
from dtgp.core import trainer as trainer_module
from dtgp.core.autodiff import Param
from dtgp.core.checkpoint import load_checkpoint
from dtgp.core.errors import ConfigurationError, ContractError, DecompositionError, DimensionError, TrainingAborted
from dtgp.core.model import DTGPModel, ModelConfig, PredictiveMixture
from dtgp.core.noise import NoiseSource
from dtgp.core.param_registry import ParamRegistry
from dtgp.core.trainer import (
    EVAL_STEP,
    Adam,
    AdamConfig,
    MetricsRow,
    MinibatchSampler,
    TrainConfig,
    Trainer,
    evaluate,
    fit,
    time_iterations,
)
from dtgp.data.datasets import gen_toy_step, load_csv, make_split, standardize


def quick_configs(**train_overrides):
    model_config = ModelConfig(layers=2, flow="arcsinh", m_inducing=5, n_samples_test=5)
    options = dict(iterations=20, batch_size=20, learning_rate=1e-2, seed=0, log_every=10, eval_samples=5)
    options.update(train_overrides)
    return model_config, TrainConfig(**options)


def minimize(param, target, learning_rate, steps):
    optimizer = Adam([param], learning_rate)
    for _ in range(steps):
        param.zero_grad()
        ad.backward(ad.vsum(ad.square(param.constrained() - ad.constant(target))))
        optimizer.step()
    return optimizer


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        param = Param(np.array([3.0, -2.0]), name="x")
        minimize(param, np.zeros(2), 0.1, 1)
        np.testing.assert_allclose(param.numpy(), [2.9, -1.9], rtol=1e-7)

    def test_converges_on_quadratic(self):
        param = Param(np.array([3.0, -2.0, 0.5]), name="x")
        target = np.array([1.0, 0.5, -0.25])
        minimize(param, target, 1e-2, 5000)
        np.testing.assert_allclose(param.numpy(), target, atol=1e-3)

    def test_zero_gradient_is_fixed_point(self):
        param = Param(np.array([1.5, -0.5]), name="x")
        optimizer = Adam([param], 0.1)
        for _ in range(10):
            param.zero_grad()
            optimizer.step()
        np.testing.assert_array_equal(param.numpy(), [1.5, -0.5])
        assert optimizer.t == 10

    def test_state_round_trip(self):
        first = Param(np.array([2.0]), name="x")
        optimizer = minimize(first, np.zeros(1), 0.05, 7)
        second = Param(first.numpy(), name="x")
        resumed = Adam([second], 0.05)
        resumed.load_state_dict(optimizer.state_dict())
        for param, opt in ((first, optimizer), (second, resumed)):
            param.raw.grad = np.array([0.3])
            opt.step()
        np.testing.assert_array_equal(second.numpy(), first.numpy())


class TestConfigs:
    @pytest.mark.parametrize("kwargs", [
        {"iterations": -1},
        {"batch_size": 0},
        {"learning_rate": 0.0},
        {"seed": -3},
        {"log_every": 0},
        {"eval_samples": 0},
        {"adam": AdamConfig(beta1=1.0)},
        {"adam": AdamConfig(epsilon=0.0)},
    ])
    def test_invalid_training_config(self, kwargs):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kwargs).check()

    def test_training_config_round_trip(self):
        config = TrainConfig(iterations=5, adam=AdamConfig(beta2=0.99))
        assert TrainConfig.from_dict(config.to_dict()) == config

    def test_metrics_row_keys(self):
        row = json.loads(MetricsRow(3, -1.5, 0.2, 0.4, 0.01).to_json())
        assert row == {"iter": 3, "elbo": -1.5, "test_nll": 0.2, "test_rmse": 0.4, "elapsed_s": 0.01}


class TestMinibatchSampler:
    def test_epochs_without_replacement(self):
        sampler = MinibatchSampler(10, 4, seed=0)
        first, second = sampler.next(), sampler.next()
        assert len(set(first) | set(second)) == 8
        assert sampler.epoch == 0
        sampler.next()
        assert sampler.epoch == 1

    def test_batch_capped_at_data_size(self):
        sampler = MinibatchSampler(5, 50, seed=1)
        assert sorted(sampler.next()) == [0, 1, 2, 3, 4]

    def test_seeded(self):
        a, b = MinibatchSampler(30, 7, seed=3), MinibatchSampler(30, 7, seed=3)
        for _ in range(10):
            np.testing.assert_array_equal(a.next(), b.next())


class TestTrainer:
    def test_step_updates_parameters(self, small_model, toy_split):
        trainer = Trainer(small_model, TrainConfig(learning_rate=1e-2))
        before = small_model.registry.values()
        value = trainer.train_step(toy_split.x_train[:20], toy_split.y_train[:20], toy_split.n_train, 1)
        assert np.isfinite(value)
        after = small_model.registry.values()
        assert all(not np.array_equal(before[name], after[name]) for name in ("layer0.m_var", "likelihood.variance"))

    def test_decomposition_failure_skips_batch(self, small_model, toy_split, monkeypatch):
        def failing_elbo(*args, **kwargs):
            raise DecompositionError("not positive definite", pivot=2, jitter=1e-2)

        monkeypatch.setattr(small_model, "elbo", failing_elbo)
        trainer = Trainer(small_model, TrainConfig())
        before = small_model.registry.values()
        assert trainer.train_step(toy_split.x_train[:20], toy_split.y_train[:20], toy_split.n_train, 1) is None
        assert trainer.skipped_steps == 1
        for name, value in small_model.registry.values().items():
            np.testing.assert_array_equal(value, before[name])

    def test_debug_tape(self, small_model, toy_split):
        trainer = Trainer(small_model, TrainConfig(debug_tape=True))
        assert trainer.train_step(toy_split.x_train[:5], toy_split.y_train[:5], toy_split.n_train, 1) is not None


class FakeModel:
    """Predicts a fixed mixture; records the evaluation noise step."""

    def __init__(self, mu, var, noise):
        self.mixture = PredictiveMixture(mu, var, noise)
        self.steps = []

    def predict(self, x, noise, n_samples=None, step=0, batch_size=100):
        self.steps.append(step)
        return self.mixture


class TestEvaluate:
    def test_perfect_mean_has_zero_rmse(self):
        y = np.array([0.5, -1.0, 2.0])
        model = FakeModel(np.tile(y, (3, 1)), np.full((3, 3), 0.1), 0.01)
        result = evaluate(model, np.zeros((3, 1)), y, n_samples=3)
        assert result.rmse == 0.0
        assert result.coverage == 1.0
        assert result.n_points == 3
        assert model.steps == [EVAL_STEP]

    def test_original_units(self, rng):
        y = rng.standard_normal(6)
        model = FakeModel(rng.standard_normal((4, 6)), rng.uniform(0.1, 0.5, (4, 6)), 0.05)
        unit = evaluate(model, np.zeros((6, 1)), y, n_samples=4)
        scaled = evaluate(model, np.zeros((6, 1)), y, n_samples=4, mean_y=10.0, std_y=2.0)
        assert scaled.nll == pytest.approx(unit.nll + np.log(2.0), rel=1e-12)
        assert scaled.rmse == pytest.approx(2.0 * unit.rmse, rel=1e-12)
        np.testing.assert_allclose(scaled.mixture.mean(), 2.0 * model.mixture.mean() + 10.0)

    def test_real_model(self, small_model, toy_split):
        result = evaluate(small_model, toy_split.x_test, toy_split.y_test, n_samples=5)
        assert np.isfinite(result.nll) and result.rmse > 0.0
        assert 0.0 <= result.coverage <= 1.0


class TestFit:
    def test_deterministic(self, toy_split):
        model_config, train_config = quick_configs()
        first = fit(model_config, train_config, toy_split)
        second = fit(model_config, train_config, toy_split)
        assert [(r.iteration, r.elbo_estimate, r.test_nll, r.test_rmse) for r in first.metrics] == \
            [(r.iteration, r.elbo_estimate, r.test_nll, r.test_rmse) for r in second.metrics]
        for name, value in first.model.registry.values().items():
            np.testing.assert_array_equal(second.model.registry.values()[name], value)

    def test_zero_iterations_logs_initial_row(self, toy_split):
        model_config, train_config = quick_configs(iterations=0)
        result = fit(model_config, train_config, toy_split)
        assert [row.iteration for row in result.metrics] == [0]
        assert result.evaluation is not None

    def test_writes_metrics_and_checkpoint(self, toy_split, tmp_path):
        model_config, train_config = quick_configs()
        metrics_path = tmp_path / "out" / "metrics.jsonl"
        result = fit(model_config, train_config, toy_split, metrics_path, tmp_path / "model.ckpt")
        rows = [json.loads(line) for line in metrics_path.read_text().splitlines()]
        assert [row["iter"] for row in rows] == [0, 10, 20]
        assert all(set(row) == {"iter", "elbo", "test_nll", "test_rmse", "elapsed_s"} for row in rows)
        assert rows[-1]["test_nll"] == pytest.approx(result.metrics[-1].test_nll)

        model, metadata = load_checkpoint(tmp_path / "model.ckpt")
        assert metadata["norm_stats"]["std_y"] == pytest.approx(toy_split.norm.std_y)
        assert metadata["split_seed"] == toy_split.plan.seed
        assert metadata["train_config"]["iterations"] == 20
        for name, value in result.model.registry.values().items():
            np.testing.assert_array_equal(model.registry.values()[name], value)

    def test_final_iteration_always_logged(self, toy_split):
        model_config, train_config = quick_configs(iterations=7, log_every=5)
        assert [row.iteration for row in fit(model_config, train_config, toy_split).metrics] == [0, 5, 7]

    def test_skipped_batches_are_counted(self, toy_split, monkeypatch):
        original = DTGPModel.elbo

        def flaky(self, x, y, n_total, noise, step=0, n_samples=None):
            if step == 3:
                raise DecompositionError("not positive definite", pivot=0, jitter=1e-2)
            return original(self, x, y, n_total, noise, step, n_samples)

        monkeypatch.setattr(DTGPModel, "elbo", flaky)
        model_config, train_config = quick_configs(iterations=5, log_every=5)
        assert fit(model_config, train_config, toy_split).skipped_steps == 1

    def test_non_finite_elbo_aborts(self, toy_split, monkeypatch):
        monkeypatch.setattr(trainer_module.Trainer, "train_step", lambda self, *args: float("nan"))
        model_config, train_config = quick_configs()
        with pytest.raises(TrainingAborted) as excinfo:
            fit(model_config, train_config, toy_split)
        assert len(excinfo.value.metrics) == 1
        assert isinstance(excinfo.value.original_error, FloatingPointError)

    def test_invalid_config_rejected_before_training(self, toy_split):
        model_config, _ = quick_configs()
        with pytest.raises(ConfigurationError):
            fit(model_config, TrainConfig(learning_rate=-1.0), toy_split)

    def test_every_parameter_receives_gradient(self, toy_split):
        model_config, train_config = quick_configs(iterations=100, log_every=100)
        result = fit(model_config, train_config, toy_split)
        assert result.model.registry.uncovered() == []
        for param in result.model.params():
            assert np.all(np.isfinite(param.raw.value)), param.name

    def test_elbo_improves(self, toy_split):
        model_config, train_config = quick_configs(iterations=500, log_every=100)
        metrics = fit(model_config, train_config, toy_split).metrics
        assert metrics[-1].elbo_estimate > metrics[0].elbo_estimate

    def test_single_layer_beats_constant_predictor(self, toy_split):
        model_config = ModelConfig(layers=1, m_inducing=10, n_samples_test=1)
        train_config = TrainConfig(iterations=300, batch_size=50, learning_rate=2e-2, log_every=300)
        result = fit(model_config, train_config, toy_split)
        y_test = toy_split.norm.unstandardize_y(toy_split.y_test)
        baseline = np.sqrt(np.mean((y_test - toy_split.norm.mean_y) ** 2))
        assert result.evaluation.rmse < baseline


class TestTiming:
    def test_zero_iterations(self, toy_split):
        model_config, train_config = quick_configs()
        assert 0.0 <= time_iterations(model_config, toy_split, 0, train_config) < 0.5

    def test_counts_iterations(self, toy_split):
        model_config, train_config = quick_configs()
        assert time_iterations(model_config, toy_split, 3, train_config) > 0.0


class TestParamRegistry:
    def test_snapshot_and_restore(self):
        registry = ParamRegistry()
        param = registry.register(Param(np.array([1.0, 2.0]), name="w"))
        snapshot = registry.values()
        param.assign(np.array([5.0, 6.0]))
        registry.load_values(snapshot)
        np.testing.assert_array_equal(param.numpy(), [1.0, 2.0])

    def test_rejects_bad_snapshots(self):
        registry = ParamRegistry()
        registry.register(Param(np.zeros(2), name="w"))
        with pytest.raises(ContractError):
            registry.load_values({})
        with pytest.raises(DimensionError):
            registry.load_values({"w": np.zeros(3)})
        with pytest.raises(ContractError):
            registry.register(Param(np.zeros(1), name="w"))

    def test_gradient_statistics(self):
        registry = ParamRegistry()
        used = registry.register(Param(np.ones(2), name="used"))
        registry.register(Param(np.ones(2), name="unused"))
        registry.zero_grads()
        ad.backward(ad.vsum(ad.square(used.constrained())))
        registry.record_gradients()
        assert registry.uncovered() == ["unused"]
        assert registry.get_gradient_statistics("used")["last_grad_norm"] == pytest.approx(np.sqrt(8.0))
        assert registry.summary()["uncovered"] == ["unused"]


# ---------------------------------------------------------------------------
# Long-running acceptance checks (pytest --run-slow)
# ---------------------------------------------------------------------------

TOY_FLOWS = ("steptanh:3:1", "identity")
TOY_SEEDS = range(5)
BOSTON_REFERENCE_NLL = 2.370
TIMING_ITERATIONS = 100


@pytest.fixture(scope="module")
def toy_step_runs():
    """2-layer models with and without a steptanh flow, trained on five splits of the toy step data."""
    dataset = gen_toy_step(100, 0.05, seed=1)
    runs = {flow: [] for flow in TOY_FLOWS}
    for seed in TOY_SEEDS:
        split = standardize(dataset, make_split(dataset.n, seed))
        train_config = TrainConfig(iterations=5000, batch_size=100, learning_rate=1e-2, seed=seed, log_every=5000)
        for flow in TOY_FLOWS:
            model_config = ModelConfig(layers=2, flow=flow, m_inducing=25, n_samples_test=100)
            runs[flow].append(fit(model_config, train_config, split))
    return runs


def point_density(mixture, t, grid):
    """Predictive density of test point ``t`` over ``grid``."""
    mu = np.repeat(mixture.mu[:, [t]], len(grid), axis=1)
    var = np.repeat(mixture.var[:, [t]], len(grid), axis=1)
    return np.exp(PredictiveMixture(mu, var, mixture.noise).log_density(grid))


@pytest.mark.slow
class TestAcceptance:
    def test_steptanh_training_stays_finite(self, toy_split):
        model_config = ModelConfig(layers=2, flow="steptanh:3:1", m_inducing=20, n_samples_test=20)
        train_config = TrainConfig(iterations=2000, batch_size=50, learning_rate=1e-2, log_every=500)
        result = fit(model_config, train_config, toy_split)
        assert all(np.isfinite(r.elbo_estimate) and np.isfinite(r.test_nll) for r in result.metrics)
        assert result.skipped_steps == 0

    def test_steptanh_flow_fits_steps_better(self, toy_step_runs):
        warped = np.array([r.evaluation.nll for r in toy_step_runs["steptanh:3:1"]])
        plain = np.array([r.evaluation.nll for r in toy_step_runs["identity"]])
        assert warped.mean() < plain.mean()
        assert np.sum(warped < plain) >= 4

    def test_predictive_density_and_coverage(self, toy_step_runs):
        runs = toy_step_runs["steptanh:3:1"]
        mixture = runs[0].evaluation.mixture
        means, sds = mixture.mean(), np.sqrt(mixture.variance())
        for t in range(len(mixture)):
            grid = np.linspace(means[t] - 10.0 * sds[t], means[t] + 10.0 * sds[t], 20001)
            assert integrate.trapezoid(point_density(mixture, t, grid), grid) == pytest.approx(1.0, abs=1e-3)
        covered = sum(r.evaluation.coverage * r.evaluation.n_points for r in runs)
        total = sum(r.evaluation.n_points for r in runs)
        assert 0.8 <= covered / total <= 1.0

    def test_bayesian_steptanh_flow(self, toy_split):
        model_config = ModelConfig(layers=2, flow="steptanh:3:1+bayes", m_inducing=10, n_samples_test=20)
        train_config = TrainConfig(iterations=2000, batch_size=50, learning_rate=1e-2, log_every=100)
        result = fit(model_config, train_config, toy_split)
        assert len(result.metrics) == 21
        assert all(np.isfinite(r.elbo_estimate) for r in result.metrics)

        model = result.model
        x, y = toy_split.x_train[:8], toy_split.y_train[:8]
        noise = NoiseSource(11)
        assert model.elbo_terms(x, y, toy_split.n_train, noise).kl_w.item() > 0.0

        def loss():
            return model.elbo(x, y, 8, noise, step=5)

        assert check_param_gradients(model.params(), loss, rtol=1e-3, atol=1e-6) == {}

    def test_iteration_time_scales_with_depth(self):
        dataset = gen_toy_step(500, 0.05, seed=4)
        split = standardize(dataset, make_split(dataset.n, 0))
        train_config = TrainConfig(batch_size=200, learning_rate=1e-2, seed=0)

        def per_iteration(layers, flow):
            model_config = ModelConfig(layers=layers, flow=flow, m_inducing=100)
            return time_iterations(model_config, split, TIMING_ITERATIONS, train_config) / TIMING_ITERATIONS

        two_layers = per_iteration(2, "identity")
        assert 1.5 <= per_iteration(4, "identity") / two_layers <= 3.0
        assert per_iteration(2, "arcsinh") / two_layers < 1.2

    @pytest.mark.skipif("DTGP_BOSTON_CSV" not in os.environ, reason="set DTGP_BOSTON_CSV to a local copy")
    def test_boston_spot_check(self):
        dataset = load_csv(os.environ["DTGP_BOSTON_CSV"])
        model_config = ModelConfig(layers=2, flow="arcsinh", m_inducing=100, n_samples_test=100)
        nll = []
        for seed in range(3):
            split = standardize(dataset, make_split(dataset.n, seed))
            train_config = TrainConfig(iterations=20000, batch_size=200, learning_rate=1e-2, seed=seed,
                                       log_every=20000)
            evaluation = fit(model_config, train_config, split).evaluation
            assert np.isfinite(evaluation.rmse)
            nll.append(evaluation.nll)
        assert abs(np.mean(nll) - BOSTON_REFERENCE_NLL) < 0.5
