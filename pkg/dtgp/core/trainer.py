"""
ELBO maximization with minibatches and Adam, test metrics and timing.
"""

from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union
import json
import logging
import time

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tape
from .checkpoint import save_checkpoint
from .errors import ConfigurationError, DecompositionError, DTGPError, TrainingAborted
from .model import DTGPModel, ModelConfig, PredictiveMixture
from .noise import NoiseSource

logger = logging.getLogger(__name__)

WARMUP_ITERATIONS = 10
# Offsets the evaluation noise away from the training steps.
EVAL_STEP = 2 ** 40


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def validate(self) -> List[str]:
        errors = []
        if not 0.0 < self.beta1 < 1.0:
            errors.append("adam.beta1 must lie in (0, 1)")
        if not 0.0 < self.beta2 < 1.0:
            errors.append("adam.beta2 must lie in (0, 1)")
        if self.epsilon <= 0.0:
            errors.append("adam.epsilon must be positive")
        return errors


@dataclass
class TrainConfig:
    iterations: int = 80000
    batch_size: int = 200
    learning_rate: float = 1e-2
    seed: int = 0
    adam: AdamConfig = field(default_factory=AdamConfig)
    log_every: int = 1000
    eval_samples: Optional[int] = None
    debug_tape: bool = False

    def validate(self) -> List[str]:
        errors = []
        if self.iterations < 0:
            errors.append("iterations must be nonnegative")
        if self.batch_size < 1:
            errors.append("batch_size must be at least 1")
        if self.learning_rate <= 0.0:
            errors.append("learning_rate must be positive")
        if self.seed < 0:
            errors.append("seed must be nonnegative")
        if self.log_every < 1:
            errors.append("log_every must be at least 1")
        if self.eval_samples is not None and self.eval_samples < 1:
            errors.append("eval_samples must be at least 1")
        return errors + self.adam.validate()

    def check(self) -> "TrainConfig":
        errors = self.validate()
        if errors:
            raise ConfigurationError(errors, source="training")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if isinstance(known.get("adam"), dict):
            known["adam"] = AdamConfig(**known["adam"])
        return cls(**known)


class Adam:
    """Adam on the raw values of a list of Params (minimizes)."""

    def __init__(self, params: Sequence[Param], learning_rate: float = 1e-2, config: Optional[AdamConfig] = None):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.config = config or AdamConfig()
        self.t = 0
        self.m = {p.name: np.zeros(p.shape) for p in self.params}
        self.v = {p.name: np.zeros(p.shape) for p in self.params}

    def step(self):
        beta1, beta2, eps = self.config.beta1, self.config.beta2, self.config.epsilon
        self.t += 1
        correction1 = 1.0 - beta1 ** self.t
        correction2 = 1.0 - beta2 ** self.t
        for param in self.params:
            g = param.grad
            m = self.m[param.name] = beta1 * self.m[param.name] + (1.0 - beta1) * g
            v = self.v[param.name] = beta2 * self.v[param.name] + (1.0 - beta2) * g * g
            update = self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + eps)
            param.raw.value = param.raw.value - update

    def state_dict(self) -> Dict[str, Any]:
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: Dict[str, Any]):
        self.t = int(state["t"])
        self.m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}


@dataclass
class MetricsRow:
    iteration: int
    elbo_estimate: float
    test_nll: float
    test_rmse: float
    elapsed_seconds: float

    def to_json(self) -> str:
        return json.dumps({
            "iter": self.iteration,
            "elbo": self.elbo_estimate,
            "test_nll": self.test_nll,
            "test_rmse": self.test_rmse,
            "elapsed_s": self.elapsed_seconds,
        })


@dataclass
class EvalResult:
    nll: float
    rmse: float
    coverage: float
    n_points: int
    mixture: Optional[PredictiveMixture] = None


class MinibatchSampler:
    """Uniform minibatches without replacement, reshuffled every epoch."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng([seed, 1])
        self.epoch = 0
        self._order = self.rng.permutation(n)
        self._position = 0

    def next(self) -> np.ndarray:
        if self._position + self.batch_size > self.n:
            self.epoch += 1
            self._order = self.rng.permutation(self.n)
            self._position = 0
        batch = self._order[self._position:self._position + self.batch_size]
        self._position += self.batch_size
        return batch


class Trainer:
    def __init__(self, model: DTGPModel, config: TrainConfig):
        self.model = model
        self.config = config.check()
        self.noise = NoiseSource(config.seed)
        self.optimizer = Adam(model.params(), config.learning_rate, config.adam)
        self.skipped_steps = 0

    def train_step(self, x: np.ndarray, y: np.ndarray, n_total: int, step: int) -> Optional[float]:
        """
        One ELBO evaluation, backward pass and Adam update. Returns the
        pre-update ELBO estimate, or None when the batch was skipped.
        """
        registry = self.model.registry
        registry.zero_grads()
        tape = Tape(name=f"step{step}", verbose=True) if self.config.debug_tape else nullcontext()
        try:
            with tape:
                elbo = self.model.elbo(x, y, n_total, self.noise, step)
                ad.backward(-elbo)
        except DecompositionError as e:
            registry.zero_grads()
            self.skipped_steps += 1
            logger.warning(f"Skipping batch at step {step}: {e}")
            return None
        registry.record_gradients()
        self.optimizer.step()
        return elbo.item()


def evaluate(model: DTGPModel, x_test: np.ndarray, y_test: np.ndarray, n_samples: Optional[int] = None,
             mean_y: float = 0.0, std_y: float = 1.0, seed: int = 0) -> EvalResult:
    """
    NLL, RMSE and 95% interval coverage on standardized test data, reported
    in the original target units.
    """
    y_test = np.asarray(y_test, dtype=np.float64).reshape(-1)
    mixture = model.predict(x_test, NoiseSource(seed), n_samples, step=EVAL_STEP)
    nll = -float(np.mean(mixture.log_density(y_test))) + float(np.log(std_y))
    rmse = float(np.sqrt(np.mean((mixture.mean() - y_test) ** 2))) * std_y
    coverage = mixture.coverage(y_test, 0.95)
    return EvalResult(nll=nll, rmse=rmse, coverage=coverage, n_points=len(y_test),
                      mixture=mixture.rescaled(mean_y, std_y))


@dataclass
class FitResult:
    model: DTGPModel
    metrics: List[MetricsRow]
    skipped_steps: int
    evaluation: Optional[EvalResult] = None


def fit(model_config: ModelConfig, train_config: TrainConfig, split, metrics_path: Optional[Union[str, Path]] = None,
        checkpoint_path: Optional[Union[str, Path]] = None) -> FitResult:
    """
    Train a fresh model on ``split`` (a StandardizedSplit). Metric rows are
    appended to ``metrics_path`` as JSON lines; a final checkpoint is written
    to ``checkpoint_path``.
    """
    model_config.check()
    train_config.check()
    model = DTGPModel.build(model_config, split.x_train, seed=train_config.seed)
    trainer = Trainer(model, train_config)
    sampler = MinibatchSampler(split.n_train, train_config.batch_size, train_config.seed)
    n_total = split.n_train
    eval_samples = train_config.eval_samples or model_config.n_samples_test
    metrics: List[MetricsRow] = []

    logger.info(
        f"Training {model_config.tag} on {split.name}: N={n_total}, B={sampler.batch_size}, "
        f"iterations={train_config.iterations}, seed={train_config.seed}"
    )
    handle = None
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        handle = open(metrics_path, "w", encoding="utf-8")

    start = time.perf_counter()
    last = None

    def record(iteration: int, elbo_estimate: float):
        result = evaluate(model, split.x_test, split.y_test, eval_samples,
                          split.norm.mean_y, split.norm.std_y, seed=train_config.seed)
        row = MetricsRow(iteration, float(elbo_estimate), result.nll, result.rmse, time.perf_counter() - start)
        metrics.append(row)
        if handle is not None:
            handle.write(row.to_json() + "\n")
            handle.flush()
        logger.info(
            f"iter {iteration}: elbo={row.elbo_estimate:.4f} test_nll={row.test_nll:.4f} "
            f"test_rmse={row.test_rmse:.4f}"
        )
        return result

    try:
        batch = sampler.next()
        initial = model.elbo(split.x_train[batch], split.y_train[batch], n_total, trainer.noise, 0)
        last = record(0, initial.item())
        estimate = initial.item()
        for iteration in range(1, train_config.iterations + 1):
            batch = sampler.next()
            value = trainer.train_step(split.x_train[batch], split.y_train[batch], n_total, iteration)
            if value is not None:
                if not np.isfinite(value):
                    raise FloatingPointError(f"non-finite ELBO at iteration {iteration}")
                estimate = value
            if iteration % train_config.log_every == 0 or iteration == train_config.iterations:
                last = record(iteration, estimate)
    except (DTGPError, ArithmeticError) as e:
        logger.error(f"Training aborted: {e}", exc_info=True)
        raise TrainingAborted(str(e), metrics, e)
    finally:
        if handle is not None:
            handle.close()

    if trainer.skipped_steps:
        logger.warning(f"{trainer.skipped_steps} batch(es) skipped after Cholesky failures")
    uncovered = model.registry.uncovered()
    if train_config.iterations and uncovered:
        logger.warning(f"Parameters without gradient signal: {', '.join(uncovered)}")
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, metadata={
            "norm_stats": split.norm.to_dict(),
            "split_seed": int(split.plan.seed),
            "test_fraction": float(split.plan.test_fraction),
            "train_config": train_config.to_dict(),
        })
    return FitResult(model, metrics, trainer.skipped_steps, last)


def time_iterations(model_config: ModelConfig, split, n_iter: int = 1000,
                    train_config: Optional[TrainConfig] = None) -> float:
    """Wall-clock seconds for ``n_iter`` training steps after an untimed warm-up."""
    train_config = train_config or TrainConfig()
    model = DTGPModel.build(model_config, split.x_train, seed=train_config.seed)
    trainer = Trainer(model, train_config)
    sampler = MinibatchSampler(split.n_train, train_config.batch_size, train_config.seed)
    step = 0
    for _ in range(WARMUP_ITERATIONS):
        batch = sampler.next()
        trainer.train_step(split.x_train[batch], split.y_train[batch], split.n_train, step)
        step += 1
    start = time.perf_counter()
    for _ in range(n_iter):
        batch = sampler.next()
        trainer.train_step(split.x_train[batch], split.y_train[batch], split.n_train, step)
        step += 1
    elapsed = time.perf_counter() - start
    logger.info(f"{model_config.tag} ({model_config.flow}): {n_iter} iterations in {elapsed:.3f}s")
    return elapsed
