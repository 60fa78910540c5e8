"""
Deep transformed GP: a stack of sparse variational GP layers whose hidden
samples are warped by elementwise flows.

Samples are carried as 2-D matrices with S*B rows in sample-major order:
row s*B + b holds sample s of batch point b.
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence
import logging

import numpy as np
from scipy.special import logsumexp, ndtr

from . import autodiff as ad
from .autodiff import ArrayLike, Param, Var
from .errors import ConfigurationError, DimensionError
from .flows import FlowSpec, FlowStack, flow_forward, kl_weights, sample_weights
from .kernels import MeanFn, RbfArdParams
from .noise import FLOW_WEIGHTS, LAYER_SAMPLES, PRIOR_DRAW, NoiseSource
from .param_registry import ParamRegistry
from .svgp_layer import (
    DEFAULT_JITTER,
    FINAL_CHOL_SCALE,
    INNER_CHOL_SCALE,
    LayerState,
    build_layer,
    conditional,
    kl_u,
    sample_layer,
    warp,
)

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class ModelConfig:
    """Architecture of a DTGP. ``flow`` applies to every inner layer unless ``layer_flows`` is given."""
    layers: int = 2
    widths: List[int] = field(default_factory=list)
    flow: str = "identity"
    layer_flows: List[str] = field(default_factory=list)
    m_inducing: int = 100
    n_samples_train: int = 1
    n_samples_test: int = 100
    noise_variance: float = 0.01
    jitter: float = DEFAULT_JITTER

    def layer_widths(self) -> List[int]:
        return list(self.widths) if self.widths else [1] * self.layers

    def flow_specs(self) -> List[FlowSpec]:
        """One FlowSpec per layer; the final layer is always the identity."""
        if self.layer_flows:
            specs = [FlowSpec.parse(text) for text in self.layer_flows]
        else:
            specs = [FlowSpec.parse(self.flow) for _ in range(self.layers - 1)] + [FlowSpec()]
        specs[-1] = FlowSpec()
        return specs

    def validate(self) -> List[str]:
        errors = []
        if self.layers < 1:
            errors.append("layers must be at least 1")
        widths = self.layer_widths()
        if len(widths) != self.layers:
            errors.append(f"expected {self.layers} widths, got {len(widths)}")
        if any(w < 1 for w in widths):
            errors.append("every layer width must be at least 1")
        if widths and widths[-1] != 1:
            errors.append("the final layer width must be 1 (scalar regression)")
        if self.layer_flows:
            if len(self.layer_flows) != self.layers:
                errors.append(f"expected {self.layers} layer flows, got {len(self.layer_flows)}")
            elif self.layer_flows[-1] != "identity":
                errors.append("the final layer flow must be identity")
        if self.m_inducing < 1:
            errors.append("m_inducing must be at least 1")
        if self.n_samples_train < 1 or self.n_samples_test < 1:
            errors.append("sample counts must be at least 1")
        if self.noise_variance <= 0.0:
            errors.append("noise_variance must be positive")
        if self.jitter < 0.0:
            errors.append("jitter must be nonnegative")
        if not errors:
            try:
                self.flow_specs()
            except ConfigurationError as e:
                errors.extend(e.errors)
        return errors

    def check(self) -> "ModelConfig":
        errors = self.validate()
        if errors:
            raise ConfigurationError(errors, source="model")
        return self

    @property
    def tag(self) -> str:
        """Short model label, e.g. ``2-DTGP`` (``2-DGP`` when every flow is the identity)."""
        kind = "DGP" if all(s.is_identity for s in self.flow_specs()) else "DTGP"
        return f"{self.layers}-{kind}"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class GaussianLikelihood:
    def __init__(self, variance: float = 0.01):
        self.log_noise = Param(variance, transform="exp", name="likelihood.variance")

    def variance(self) -> Var:
        return self.log_noise.constrained()

    def params(self) -> List[Param]:
        return [self.log_noise]


@dataclass
class PropagationTrace:
    """Warped samples of every inner layer and the final-layer moments, all with S*B rows."""
    hidden: List[Var]
    mu: Var
    var: Var
    n_samples: int
    batch_size: int
    weights: List[Optional[List[Var]]] = field(default_factory=list)

    def moments(self):
        """Final-layer moments as [S x B] arrays."""
        shape = (self.n_samples, self.batch_size)
        return self.mu.value.reshape(shape), self.var.value.reshape(shape)


@dataclass
class ElboTerms:
    elbo: Var
    ell: Var
    kl_u: Var
    kl_w: Var

    def as_floats(self) -> Dict[str, float]:
        return {
            "elbo": self.elbo.item(),
            "ell": self.ell.item(),
            "kl_u": self.kl_u.item(),
            "kl_w": self.kl_w.item(),
        }


class PredictiveMixture:
    """
    Equal-weight Gaussian mixture over y at each test point.

    ``mu`` and ``var`` are [S x T] latent moments; every component adds the
    likelihood variance ``noise``.
    """

    def __init__(self, mu: np.ndarray, var: np.ndarray, noise: float):
        mu, var = np.atleast_2d(mu), np.atleast_2d(var)
        if mu.shape != var.shape:
            raise DimensionError("mixture moments disagree", [mu.shape, var.shape])
        self.mu = mu
        self.var = var
        self.noise = float(noise)

    @property
    def n_components(self) -> int:
        return self.mu.shape[0]

    def __len__(self) -> int:
        return self.mu.shape[1]

    def component_sd(self) -> np.ndarray:
        return np.sqrt(self.var + self.noise)

    def mean(self) -> np.ndarray:
        return self.mu.mean(axis=0)

    def variance(self) -> np.ndarray:
        """Law of total variance over the components, noise included."""
        return np.mean(self.var + self.noise, axis=0) + np.mean(self.mu ** 2, axis=0) - self.mean() ** 2

    def log_density(self, y: ArrayLike) -> np.ndarray:
        return log_predictive_density(y, self)

    def cdf(self, y: ArrayLike) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return np.mean(ndtr((y[None, :] - self.mu) / self.component_sd()), axis=0)

    def interval(self, level: float = 0.95, tol: float = 1e-10, max_iter: int = 200):
        """Central predictive interval per point, by bisection on the mixture CDF."""
        if not 0.0 < level < 1.0:
            raise ValueError("interval level must lie in (0, 1)")
        tail = 0.5 * (1.0 - level)
        return self._quantile(tail, tol, max_iter), self._quantile(1.0 - tail, tol, max_iter)

    def _quantile(self, q: float, tol: float, max_iter: int) -> np.ndarray:
        sd = self.component_sd()
        lo = np.min(self.mu - 10.0 * sd, axis=0)
        hi = np.max(self.mu + 10.0 * sd, axis=0)
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < q
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.max(hi - lo) < tol:
                break
        return 0.5 * (lo + hi)

    def coverage(self, y: ArrayLike, level: float = 0.95) -> float:
        y = np.asarray(y, dtype=np.float64)
        lower, upper = self.interval(level)
        return float(np.mean((y >= lower) & (y <= upper)))

    def rescaled(self, mean_y: float, std_y: float) -> "PredictiveMixture":
        """The same mixture for y * std_y + mean_y."""
        return PredictiveMixture(self.mu * std_y + mean_y, self.var * std_y ** 2, self.noise * std_y ** 2)


def ell_closed_form(y: ArrayLike, mu: ArrayLike, var: ArrayLike, lik: GaussianLikelihood) -> Var:
    """
    (1/S) sum_s sum_b E_{N(f | mu, var)}[log N(y_b | f, sigma^2)] for [S x B] moments.
    """
    mu, var = ad.as_var(mu), ad.as_var(var)
    y = np.asarray(ad.as_var(y).value, dtype=np.float64).reshape(-1)
    if mu.ndim != 2 or mu.shape != var.shape or mu.shape[1] != y.shape[0]:
        raise DimensionError("ell_closed_form: expected [S x B] moments and B targets", [mu.shape, var.shape, y.shape])
    n_samples, batch = mu.shape
    noise = lik.variance()
    targets = ad.constant(np.broadcast_to(y, mu.shape))
    squared = ad.vsum(ad.square(targets - mu) + var)
    log_norm = -0.5 * float(batch) * (LOG_2PI + ad.log(noise))
    return log_norm - squared / (2.0 * float(n_samples) * noise)


def log_predictive_density(y_star: ArrayLike, mixture: PredictiveMixture) -> np.ndarray:
    """logsumexp_s log N(y | mu_s, var_s + sigma^2) - log S, per point."""
    y = np.asarray(ad.as_var(y_star).value, dtype=np.float64).reshape(-1)
    if y.shape[0] != len(mixture):
        raise DimensionError("one target per test point is required", [y.shape, len(mixture)])
    total = mixture.var + mixture.noise
    log_pdf = -0.5 * (LOG_2PI + np.log(total) + (y[None, :] - mixture.mu) ** 2 / total)
    return logsumexp(log_pdf, axis=0) - np.log(mixture.n_components)


class DTGPModel:
    """
    L layers plus a Gaussian likelihood.

    Use :meth:`build` to initialize from training inputs; the constructor only
    wires already-initialized layers together.
    """

    def __init__(self, config: ModelConfig, layers: Sequence[LayerState], likelihood: GaussianLikelihood,
                 input_dim: int):
        self.config = config
        self.layers = list(layers)
        self.likelihood = likelihood
        self.input_dim = input_dim
        self.registry = ParamRegistry()
        for layer in self.layers:
            for param in layer.params():
                self.registry.register(param)
        for param in likelihood.params():
            self.registry.register(param)

    @classmethod
    def build(cls, config: ModelConfig, x_train: np.ndarray, seed: int = 0) -> "DTGPModel":
        """
        Initialize every layer around the inputs it will see under the
        identity-initialized stack: the training inputs pushed through the
        preceding mean functions.
        """
        config.check()
        x_train = np.atleast_2d(np.asarray(x_train, dtype=np.float64))
        input_dim = x_train.shape[1]
        widths = config.layer_widths()
        specs = config.flow_specs()

        layers, running = [], x_train
        for index, (width, spec) in enumerate(zip(widths, specs)):
            final = index == config.layers - 1
            name = f"layer{index}"
            flow = FlowStack(spec, width, input_dim, name=f"{name}.flow",
                             rng=np.random.default_rng([seed, index]))
            layer = build_layer(running, width, flow, config.m_inducing, final,
                                seed=seed + index, jitter=config.jitter, name=name)
            layers.append(layer)
            if not final:
                running = layer.mean(running).value
        model = cls(config, layers, GaussianLikelihood(config.noise_variance), input_dim)
        logger.info(
            f"Built {config.tag} model: flows={[str(s) for s in specs]}, widths={widths}, "
            f"M={config.m_inducing}, {model.registry.total_size()} parameters"
        )
        return model

    @classmethod
    def skeleton(cls, config: ModelConfig, input_dim: int, means: Sequence[MeanFn]) -> "DTGPModel":
        """Layers of the right shapes with placeholder values, ready for ``registry.load_values``."""
        config.check()
        widths = config.layer_widths()
        layers, d_in = [], input_dim
        for index, (width, spec, mean) in enumerate(zip(widths, config.flow_specs(), means)):
            final = index == config.layers - 1
            name = f"layer{index}"
            flow = FlowStack(spec, width, input_dim, name=f"{name}.flow")
            kernel = RbfArdParams(d_in, name=f"{name}.kernel")
            z = np.zeros((config.m_inducing, d_in))
            layers.append(LayerState(
                z, width, kernel, mean, flow,
                chol_scale=FINAL_CHOL_SCALE if final else INNER_CHOL_SCALE,
                jitter=config.jitter, name=name,
            ))
            d_in = width
        return cls(config, layers, GaussianLikelihood(config.noise_variance), input_dim)

    def params(self) -> List[Param]:
        return self.registry.list_params()

    @property
    def has_bayesian_flows(self) -> bool:
        return any(layer.flow.is_bayesian for layer in self.layers)

    def _flow_weights(self, layer_index: int, noise: NoiseSource, step: int, n_draws: int):
        flow = self.layers[layer_index].flow
        if not flow.is_bayesian:
            return None
        eps = noise.normal(step, layer_index, FLOW_WEIGHTS, (n_draws, flow.posterior.size))
        return [sample_weights(flow.posterior, eps[i]) for i in range(n_draws)]

    def propagate(self, x: ArrayLike, noise: NoiseSource, step: int = 0, n_samples: Optional[int] = None,
                  weight_draws: int = 1, block: int = 0) -> PropagationTrace:
        """
        Sample through the inner layers and return the final-layer moments.

        Bayesian flows draw ``weight_draws`` weight vectors per layer (1, or one
        per sample); weight draws ignore ``block`` so every chunk of a
        prediction sees the same functions.
        """
        x = ad.as_var(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim or x.shape[0] < 1:
            raise DimensionError("model input has the wrong shape", [x.shape, self.input_dim])
        n_samples = n_samples or self.config.n_samples_train
        batch = x.shape[0]

        hidden: List[Var] = []
        weights: List[Optional[List[Var]]] = []
        running = x
        for index, layer in enumerate(self.layers):
            mu, var = conditional(running, layer)
            if index == 0:
                mu, var = ad.tile_rows(mu, n_samples), ad.tile_rows(var, n_samples)
            if index == len(self.layers) - 1:
                return PropagationTrace(hidden, mu, var, n_samples, batch, weights)
            eps = noise.normal(step, index, LAYER_SAMPLES, (n_samples * batch, layer.d_out), block)
            f0 = sample_layer(mu, var, eps)
            layer_weights = self._flow_weights(index, noise, step, weight_draws)
            weights.append(layer_weights)
            coeffs = layer.flow.coefficients(x, n_samples, layer_weights)
            running = warp(f0, layer, coeffs)
            hidden.append(running)
        raise AssertionError("unreachable")

    def elbo_terms(self, x: ArrayLike, y: ArrayLike, n_total: int, noise: NoiseSource, step: int = 0,
                   n_samples: Optional[int] = None) -> ElboTerms:
        x = ad.as_var(x)
        batch = x.shape[0]
        if batch > n_total:
            raise DimensionError("batch is larger than the data set", [batch, n_total])
        trace = self.propagate(x, noise, step, n_samples)
        shape = (trace.n_samples, batch)
        ell = ell_closed_form(y, ad.reshape(trace.mu, shape), ad.reshape(trace.var, shape), self.likelihood)

        kl_total = kl_u(self.layers[0])
        for layer in self.layers[1:]:
            kl_total = kl_total + kl_u(layer)
        kl_w = ad.constant(0.0)
        for layer in self.layers:
            if layer.flow.is_bayesian:
                kl_w = kl_w + kl_weights(layer.flow.posterior)

        elbo = (float(n_total) / float(batch)) * ell - kl_total - kl_w
        return ElboTerms(elbo=elbo, ell=ell, kl_u=kl_total, kl_w=kl_w)

    def elbo(self, x: ArrayLike, y: ArrayLike, n_total: int, noise: NoiseSource, step: int = 0,
             n_samples: Optional[int] = None) -> Var:
        return self.elbo_terms(x, y, n_total, noise, step, n_samples).elbo

    def predict(self, x_star: np.ndarray, noise: NoiseSource, n_samples: Optional[int] = None,
                step: int = 0, batch_size: int = 100) -> PredictiveMixture:
        """Mixture of the final-layer moments of ``n_samples`` propagated samples."""
        x_star = np.atleast_2d(np.asarray(x_star, dtype=np.float64))
        n_samples = n_samples or self.config.n_samples_test
        draws = n_samples if self.has_bayesian_flows else 1
        mus, variances = [], []
        for block, start in enumerate(range(0, x_star.shape[0], batch_size)):
            trace = self.propagate(x_star[start:start + batch_size], noise, step, n_samples, weight_draws=draws,
                                   block=block)
            mu, var = trace.moments()
            mus.append(mu)
            variances.append(var)
        noise_var = float(self.likelihood.log_noise.numpy())
        return PredictiveMixture(np.concatenate(mus, axis=1), np.concatenate(variances, axis=1), noise_var)

    def prior_sample(self, x: np.ndarray, noise: NoiseSource, step: int = 0) -> np.ndarray:
        """
        Ancestral draw of the latent function at ``x`` from the prior: full
        covariance GP draws at every layer, warped by the current flows
        (posterior-mean weights for Bayesian flows).
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        running = x
        for index, layer in enumerate(self.layers):
            cov = layer.kernel.matrix(running, running).value
            cov = cov + layer.jitter * float(layer.kernel.log_variance.numpy()) * np.eye(n)
            chol = ad.cholesky(cov).value
            eps = noise.normal(step, index, PRIOR_DRAW, (n, layer.d_out))
            f0 = layer.mean(running).value + chol @ eps
            if index == len(self.layers) - 1:
                return f0
            coeffs = layer.flow.coefficients(x, 1)
            running = warp(f0, layer, coeffs).value
        raise AssertionError("unreachable")

    def flow_curves(self, f: ArrayLike) -> Dict[str, np.ndarray]:
        """
        G(f) of every inner layer on a 1-D grid, keyed ``layer{l}_out{j}``.

        Input-dependent flows are evaluated at a zero layer input (the
        training-input mean for the first layer) with mean network weights.
        """
        f = np.asarray(f, dtype=np.float64).reshape(-1)
        curves = {}
        for index, layer in enumerate(self.layers[:-1]):
            coeffs = layer.flow.coefficients(np.zeros((f.size, layer.d_in)), 1)
            values = flow_forward(np.repeat(f[:, None], layer.d_out, axis=1), coeffs).value
            curves.update({f"layer{index}_out{j}": values[:, j] for j in range(layer.d_out)})
        return curves

    def summary(self) -> Dict[str, Any]:
        return {
            "tag": self.config.tag,
            "input_dim": self.input_dim,
            "layers": [repr(layer) for layer in self.layers],
            "parameters": self.registry.summary(),
        }
