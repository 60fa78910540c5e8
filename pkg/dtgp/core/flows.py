"""
Elementwise monotone normalizing flows.

A flow is a composition of K invertible steps applied elementwise to GP
samples. Coefficients are either shared by all points of a layer, produced
per point by a small network of the inputs, or produced by a network whose
weights carry a Gaussian variational posterior.
"""

from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Union
import logging
import re

import numpy as np

from . import autodiff as ad
from .autodiff import ArrayLike, Param, Var, softplus_inverse
from .errors import ConfigurationError, ConvergenceError, DimensionError
from .flow_registry import get_global_flow_registry

logger = logging.getLogger(__name__)

MAX_INVERSE_ITERATIONS = 100
COEFF_NET_HIDDEN = 25


# ---------------------------------------------------------------------------
# Specification
# ---------------------------------------------------------------------------

_SPEC_PATTERN = re.compile(r"^(?P<kind>[a-z_]+)(?P<args>(?::\d+)*)(?P<flags>(?:\+[a-z]+)*)$")


@dataclass
class FlowSpec:
    """What flow a layer uses; parsed from strings like ``steptanh:3:1+id``."""
    kind: str = "identity"
    steps: int = 1
    steptanh_terms: int = 3
    input_dependent: bool = False
    bayesian_weights: bool = False

    def validate(self) -> List[str]:
        errors = []
        if get_global_flow_registry().get(self.kind) is None:
            errors.append(f"unknown flow kind '{self.kind}'")
        if self.steps < 1:
            errors.append("flow needs at least one step")
        if self.kind == "steptanh" and self.steptanh_terms < 1:
            errors.append("steptanh needs at least one tanh term")
        if self.kind == "identity":
            if self.steps != 1:
                errors.append("identity flow has exactly one step")
            if self.input_dependent or self.bayesian_weights:
                errors.append("identity flow has no coefficients to make input dependent")
        if self.bayesian_weights and not self.input_dependent:
            errors.append("Bayesian weights need an input-dependent flow")
        return errors

    def check(self) -> "FlowSpec":
        errors = self.validate()
        if errors:
            raise ConfigurationError(errors, source=f"flow '{self}'")
        return self

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity"

    @classmethod
    def parse(cls, text: str) -> "FlowSpec":
        """
        Parse ``identity``, ``arcsinh[:K]`` or ``steptanh[:J[:K]]`` with optional
        ``+id`` (input dependent) and ``+bayes`` (Bayesian weights, implies +id).
        """
        match = _SPEC_PATTERN.match(text.strip().lower())
        if not match:
            raise ConfigurationError([f"cannot parse flow specification '{text}'"])
        kind = match.group("kind")
        numbers = [int(n) for n in match.group("args").split(":") if n]
        flags = [f for f in match.group("flags").split("+") if f]
        unknown = [f for f in flags if f not in ("id", "bayes")]
        if unknown:
            raise ConfigurationError([f"unknown flow flag(s): {', '.join(unknown)}"])

        spec = cls(kind=kind)
        if kind == "steptanh":
            if len(numbers) > 2:
                raise ConfigurationError([f"steptanh takes at most J and K: '{text}'"])
            if numbers:
                spec.steptanh_terms = numbers[0]
            if len(numbers) > 1:
                spec.steps = numbers[1]
        elif numbers:
            if len(numbers) > 1:
                raise ConfigurationError([f"{kind} takes at most K: '{text}'"])
            spec.steps = numbers[0]
        spec.bayesian_weights = "bayes" in flags
        spec.input_dependent = "id" in flags or spec.bayesian_weights
        return spec.check()

    def __str__(self) -> str:
        if self.kind == "identity":
            return "identity"
        text = self.kind
        if self.kind == "steptanh":
            text += f":{self.steptanh_terms}:{self.steps}"
        else:
            text += f":{self.steps}"
        if self.bayesian_weights:
            text += "+bayes"
        elif self.input_dependent:
            text += "+id"
        return text

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Union[dict, str]) -> "FlowSpec":
        if isinstance(data, str):
            return cls.parse(data)
        return cls(**data).check()


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------

class FlowStep(ABC):
    """
    One elementwise, strictly increasing map.

    Coefficients arrive raw (unconstrained) and already shaped like the
    values they act on; positivity is enforced inside the step.
    """

    kind = "base"
    n_coeffs = 0

    @abstractmethod
    def init_raw(self) -> np.ndarray:
        """Raw coefficients of the near-identity initialization."""
        pass

    @abstractmethod
    def forward(self, f: Var, coeffs: Sequence[Var]) -> Var:
        pass

    @abstractmethod
    def log_deriv(self, f: Var, coeffs: Sequence[Var]) -> Var:
        pass

    @abstractmethod
    def forward_np(self, f: np.ndarray, coeffs: Sequence[np.ndarray]) -> np.ndarray:
        pass

    @abstractmethod
    def inverse_np(self, g: np.ndarray, coeffs: Sequence[np.ndarray], tol: float) -> np.ndarray:
        pass

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class IdentityStep(FlowStep):
    kind = "identity"
    n_coeffs = 0

    def init_raw(self) -> np.ndarray:
        return np.zeros(0)

    def forward(self, f, coeffs):
        return f

    def log_deriv(self, f, coeffs):
        return ad.constant(np.zeros(f.shape))

    def forward_np(self, f, coeffs):
        return f

    def inverse_np(self, g, coeffs, tol):
        return g


class ArcsinhStep(FlowStep):
    """G(f) = a + b * asinh((f - c) / d) with b, d = softplus(raw)."""

    kind = "arcsinh"
    n_coeffs = 4

    def init_raw(self) -> np.ndarray:
        one = float(softplus_inverse(1.0))
        return np.array([0.0, one, 0.0, one])

    def forward(self, f, coeffs):
        a, b_raw, c, d_raw = coeffs
        return a + ad.softplus(b_raw) * ad.asinh((f - c) / ad.softplus(d_raw))

    def log_deriv(self, f, coeffs):
        _, b_raw, c, d_raw = coeffs
        d = ad.softplus(d_raw)
        u = (f - c) / d
        return ad.log(ad.softplus(b_raw)) - ad.log(d) - 0.5 * ad.log(1.0 + ad.square(u))

    def forward_np(self, f, coeffs):
        a, b_raw, c, d_raw = coeffs
        return a + np.logaddexp(0.0, b_raw) * np.arcsinh((f - c) / np.logaddexp(0.0, d_raw))

    def inverse_np(self, g, coeffs, tol):
        a, b_raw, c, d_raw = coeffs
        return c + np.logaddexp(0.0, d_raw) * np.sinh((g - a) / np.logaddexp(0.0, b_raw))


class StepTanhStep(FlowStep):
    """G(f) = f + sum_j a_j * tanh(b_j * (f - c_j)) with a_j, b_j = softplus(raw)."""

    kind = "steptanh"

    def __init__(self, terms: int = 3):
        self.terms = terms
        self.n_coeffs = 3 * terms

    def init_raw(self) -> np.ndarray:
        a = np.full(self.terms, float(softplus_inverse(1e-2)))
        b = np.full(self.terms, float(softplus_inverse(1.0)))
        c = np.linspace(-2.0, 2.0, self.terms) if self.terms > 1 else np.zeros(1)
        return np.concatenate([a, b, c])

    def _split(self, coeffs):
        j = self.terms
        return coeffs[:j], coeffs[j:2 * j], coeffs[2 * j:]

    def forward(self, f, coeffs):
        a_raw, b_raw, c = self._split(coeffs)
        out = f
        for aj, bj, cj in zip(a_raw, b_raw, c):
            out = out + ad.softplus(aj) * ad.tanh(ad.softplus(bj) * (f - cj))
        return out

    def log_deriv(self, f, coeffs):
        a_raw, b_raw, c = self._split(coeffs)
        slope = ad.constant(np.ones(f.shape))
        for aj, bj, cj in zip(a_raw, b_raw, c):
            b = ad.softplus(bj)
            t = ad.tanh(b * (f - cj))
            slope = slope + ad.softplus(aj) * b * (1.0 - ad.square(t))
        return ad.log(slope)

    def forward_np(self, f, coeffs):
        a_raw, b_raw, c = self._split(coeffs)
        out = np.array(f, dtype=np.float64, copy=True)
        for aj, bj, cj in zip(a_raw, b_raw, c):
            out = out + np.logaddexp(0.0, aj) * np.tanh(np.logaddexp(0.0, bj) * (f - cj))
        return out

    def _deriv_np(self, f, coeffs):
        a_raw, b_raw, c = self._split(coeffs)
        slope = np.ones_like(f)
        for aj, bj, cj in zip(a_raw, b_raw, c):
            b = np.logaddexp(0.0, bj)
            slope = slope + np.logaddexp(0.0, aj) * b * (1.0 - np.tanh(b * (f - cj)) ** 2)
        return slope

    def inverse_np(self, g, coeffs, tol):
        # |G(f) - f| <= sum_j a_j, so the root is bracketed by g -/+ sum_j a_j.
        reach = sum(np.logaddexp(0.0, aj) for aj in coeffs[:self.terms])
        g = np.asarray(g, dtype=np.float64)
        lo = g - reach - tol
        hi = g + reach + tol
        f = g.copy()
        residual = self.forward_np(f, coeffs) - g
        for _ in range(MAX_INVERSE_ITERATIONS):
            if np.max(np.abs(residual), initial=0.0) < tol:
                return f
            lo = np.where(residual < 0.0, f, lo)
            hi = np.where(residual > 0.0, f, hi)
            newton = f - residual / self._deriv_np(f, coeffs)
            outside = (newton <= lo) | (newton >= hi)
            f = np.where(outside, 0.5 * (lo + hi), newton)
            residual = self.forward_np(f, coeffs) - g
        worst = float(np.max(np.abs(residual), initial=0.0))
        if worst < tol:
            return f
        raise ConvergenceError("steptanh inverse did not converge", residual=worst,
                               iterations=MAX_INVERSE_ITERATIONS)

    def __repr__(self) -> str:
        return f"StepTanhStep(terms={self.terms})"


_registry = get_global_flow_registry()
_registry.register_flow_class("identity", IdentityStep)
_registry.register_flow_class("arcsinh", ArcsinhStep)
_registry.register_flow_class("steptanh", StepTanhStep)


def build_steps(spec: FlowSpec) -> List[FlowStep]:
    registry = get_global_flow_registry()
    kwargs = {"terms": spec.steptanh_terms} if spec.kind == "steptanh" else {}
    return [registry.create_step(spec.kind, **kwargs) for _ in range(spec.steps)]


# ---------------------------------------------------------------------------
# Coefficients
# ---------------------------------------------------------------------------

class FlowParams:
    """
    Raw coefficients for every step of a flow, each shaped like the values
    the flow acts on (one coefficient per point and output dimension).
    """

    def __init__(self, steps: Sequence[FlowStep], coeffs: Sequence[Sequence[Var]]):
        if len(steps) != len(coeffs):
            raise DimensionError("one coefficient list per step is required", [len(steps), len(coeffs)])
        for step, step_coeffs in zip(steps, coeffs):
            if len(step_coeffs) != step.n_coeffs:
                raise DimensionError(f"{step.kind} step needs {step.n_coeffs} coefficients",
                                     [len(step_coeffs)])
        self.steps = list(steps)
        self.coeffs = [list(c) for c in coeffs]

    @classmethod
    def from_raw(cls, steps: Sequence[FlowStep], raw: ArrayLike, shape) -> "FlowParams":
        """
        Build from a raw matrix of shape [rows x (n_coeffs * d)] (per point) or
        [n_coeffs x d] (shared), where column block i holds coefficient i.
        """
        raw = ad.as_var(raw)
        rows, d = shape
        n_total = sum(step.n_coeffs for step in steps)
        shared = raw.shape == (n_total, d)
        if not shared and raw.shape != (rows, n_total * d):
            raise DimensionError("raw coefficient matrix has the wrong shape",
                                 [raw.shape, (rows, n_total * d), (n_total, d)])
        coeffs, offset = [], 0
        for step in steps:
            step_coeffs = []
            for _ in range(step.n_coeffs):
                if shared:
                    column = ad.broadcast_to(raw[offset:offset + 1, :], (rows, d))
                else:
                    column = raw[:, offset * d:(offset + 1) * d]
                step_coeffs.append(column)
                offset += 1
            coeffs.append(step_coeffs)
        return cls(steps, coeffs)

    def numpy(self) -> List[List[np.ndarray]]:
        return [[c.value for c in step_coeffs] for step_coeffs in self.coeffs]


class CoeffNet:
    """
    One-hidden-layer tanh network mapping an input row to all raw coefficients
    of a flow stack (for every output dimension of the layer).
    """

    def __init__(self, input_dim: int, output_dim: int, hidden: int = COEFF_NET_HIDDEN):
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.hidden = hidden
        self._sizes = [
            ("w1", (input_dim, hidden)),
            ("b1", (1, hidden)),
            ("w2", (hidden, output_dim)),
            ("b2", (1, output_dim)),
        ]

    @property
    def n_weights(self) -> int:
        return int(sum(np.prod(shape) for _, shape in self._sizes))

    def unpack(self, w: Var) -> dict:
        if w.shape != (self.n_weights,):
            raise DimensionError("coefficient network weight vector has the wrong length",
                                 [w.shape, (self.n_weights,)])
        parts, offset = {}, 0
        for name, shape in self._sizes:
            size = int(np.prod(shape))
            parts[name] = ad.reshape(w[offset:offset + size], shape)
            offset += size
        return parts

    def __call__(self, x: ArrayLike, w: Var) -> Var:
        x = ad.as_var(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError("coefficient network input width mismatch", [x.shape, self.input_dim])
        p = self.unpack(w)
        n = x.shape[0]
        hidden = ad.tanh(x @ p["w1"] + ad.broadcast_to(p["b1"], (n, self.hidden)))
        return hidden @ p["w2"] + ad.broadcast_to(p["b2"], (n, self.output_dim))

    def init_weights(self, rng: np.random.Generator, output_bias: np.ndarray) -> np.ndarray:
        w1 = rng.normal(0.0, 1.0 / np.sqrt(self.input_dim), size=(self.input_dim, self.hidden))
        b1 = np.zeros(self.hidden)
        w2 = rng.normal(0.0, 1e-2, size=(self.hidden, self.output_dim))
        return np.concatenate([w1.ravel(), b1, w2.ravel(), np.asarray(output_bias, dtype=np.float64)])


def coeffs_from_input(x: ArrayLike, net: CoeffNet, w: Var, steps: Sequence[FlowStep],
                      d_out: int) -> FlowParams:
    """Per-point coefficients: row i of the result depends on input row i only."""
    raw = net(x, w)
    return FlowParams.from_raw(steps, raw, (raw.shape[0], d_out))


class WeightPosterior:
    """Diagonal Gaussian q(W) over coefficient-network weights, standard normal prior."""

    def __init__(self, mu_w: np.ndarray, log_sigma_w: Union[float, np.ndarray] = -5.0, name: str = "flow"):
        mu_w = np.asarray(mu_w, dtype=np.float64)
        self.mu_w = Param(mu_w, name=f"{name}.mu_w")
        self.log_sigma_w = Param(np.broadcast_to(log_sigma_w, mu_w.shape).copy(), name=f"{name}.log_sigma_w")

    @property
    def size(self) -> int:
        return self.mu_w.size

    def params(self) -> List[Param]:
        return [self.mu_w, self.log_sigma_w]


def sample_weights(post: WeightPosterior, eps: ArrayLike) -> Var:
    """Reparameterized draw mu + sigma * eps."""
    eps = ad.as_var(eps)
    if eps.shape != post.mu_w.shape:
        raise DimensionError("weight noise has the wrong length", [eps.shape, post.mu_w.shape])
    return post.mu_w.constrained() + ad.exp(post.log_sigma_w.constrained()) * eps


def kl_weights(post: WeightPosterior) -> Var:
    """KL(q(W) || N(0, I)) for a diagonal Gaussian q."""
    mu = post.mu_w.constrained()
    log_sigma = post.log_sigma_w.constrained()
    terms = ad.exp(2.0 * log_sigma) + ad.square(mu) - 1.0 - 2.0 * log_sigma
    return 0.5 * ad.vsum(terms)


# ---------------------------------------------------------------------------
# Flow application
# ---------------------------------------------------------------------------

def flow_forward(f: ArrayLike, params: FlowParams) -> Var:
    f = ad.as_var(f)
    for step, coeffs in zip(params.steps, params.coeffs):
        f = step.forward(f, coeffs)
    return f


def flow_log_deriv(f: ArrayLike, params: FlowParams) -> Var:
    """Accumulated log |dG/df| along the forward trajectory."""
    f = ad.as_var(f)
    total = ad.constant(np.zeros(f.shape))
    for step, coeffs in zip(params.steps, params.coeffs):
        total = total + step.log_deriv(f, coeffs)
        f = step.forward(f, coeffs)
    return total


def flow_inverse(g: ArrayLike, params: FlowParams, tol: float = 1e-8) -> Var:
    """Numerical inverse, step by step in reverse order. Not differentiated."""
    if tol <= 0.0:
        raise ConfigurationError(["inverse tolerance must be positive"])
    values = np.array(ad.as_var(g).value, copy=True)
    for step, coeffs in zip(reversed(params.steps), reversed(params.numpy())):
        values = step.inverse_np(values, coeffs, tol)
    return ad.constant(values)


class FlowStack:
    """
    The flow of one layer: K steps plus the trainable source of their
    coefficients (shared Param, coefficient network, or weight posterior).
    """

    def __init__(self, spec: FlowSpec, d_out: int, input_dim: int, name: str = "flow",
                 rng: Optional[np.random.Generator] = None):
        self.spec = spec.check()
        self.d_out = d_out
        self.input_dim = input_dim
        self.name = name
        self.steps = build_steps(spec)
        self.n_coeffs = sum(step.n_coeffs for step in self.steps)
        self.shared_coeffs: Optional[Param] = None
        self.net: Optional[CoeffNet] = None
        self.weights: Optional[Param] = None
        self.posterior: Optional[WeightPosterior] = None

        if self.is_identity:
            return
        init_raw = np.concatenate([step.init_raw() for step in self.steps])
        if not spec.input_dependent:
            self.shared_coeffs = Param(np.repeat(init_raw[:, None], d_out, axis=1), name=f"{name}.coeffs")
            return
        rng = rng if rng is not None else np.random.default_rng(0)
        self.net = CoeffNet(input_dim, self.n_coeffs * d_out)
        initial = self.net.init_weights(rng, np.repeat(init_raw, d_out))
        if spec.bayesian_weights:
            self.posterior = WeightPosterior(initial, name=name)
        else:
            self.weights = Param(initial, name=f"{name}.weights")

    @property
    def is_identity(self) -> bool:
        return self.spec.is_identity

    @property
    def is_bayesian(self) -> bool:
        return self.posterior is not None

    def params(self) -> List[Param]:
        if self.shared_coeffs is not None:
            return [self.shared_coeffs]
        if self.weights is not None:
            return [self.weights]
        if self.posterior is not None:
            return self.posterior.params()
        return []

    def coefficients(self, x: ArrayLike, n_samples: int = 1,
                     weights: Optional[Sequence[Var]] = None) -> FlowParams:
        """
        FlowParams for ``n_samples`` stacked copies of the rows of ``x``.

        ``weights`` holds either one network weight vector (shared by all
        samples) or one per sample; it defaults to the deterministic weights.
        """
        x = ad.as_var(x)
        rows = x.shape[0] * n_samples
        if self.is_identity:
            return FlowParams(self.steps, [[] for _ in self.steps])
        if self.shared_coeffs is not None:
            return FlowParams.from_raw(self.steps, self.shared_coeffs.constrained(), (rows, self.d_out))

        if weights is None:
            if self.posterior is not None:
                weights = [self.posterior.mu_w.constrained()]
            else:
                weights = [self.weights.constrained()]
        if len(weights) == 1:
            raw = ad.tile_rows(self.net(x, weights[0]), n_samples)
        elif len(weights) == n_samples:
            raw = ad.concat([self.net(x, w) for w in weights], axis=0)
        else:
            raise DimensionError("need one weight vector or one per sample", [len(weights), n_samples])
        return FlowParams.from_raw(self.steps, raw, (rows, self.d_out))

    def __repr__(self) -> str:
        return f"FlowStack({self.spec}, d_out={self.d_out})"
