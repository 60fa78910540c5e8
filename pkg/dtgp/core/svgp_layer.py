"""
One sparse variational GP layer: marginal conditional at the layer inputs,
reparameterized sampling, flow warping and the inducing-point KL.

The variational distribution is not whitened: ``m_var`` and ``S`` are the
mean and covariance of the inducing outputs themselves.
"""

from typing import List, Optional, Sequence, Tuple
import logging

import numpy as np
from sklearn.cluster import KMeans

from . import autodiff as ad
from .autodiff import ArrayLike, Param, Var
from .errors import ContractError, DimensionError
from .flows import FlowParams, FlowStack, flow_forward
from .kernels import MeanFn, RbfArdParams, init_mean_function, mean_apply

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-8
DEFAULT_JITTER = 1e-6
INNER_CHOL_SCALE = 1e-5
FINAL_CHOL_SCALE = 1.0


class LayerState:
    """
    Parameters of one layer.

    Each output dimension h has its own Cholesky factor of S, stored as a
    strictly lower part plus a log diagonal; Z, the kernel, the mean function
    and the flow are shared by all output dimensions.
    """

    def __init__(
        self,
        z: np.ndarray,
        d_out: int,
        kernel: RbfArdParams,
        mean: MeanFn,
        flow: FlowStack,
        chol_scale: float = INNER_CHOL_SCALE,
        jitter: float = DEFAULT_JITTER,
        name: str = "layer",
    ):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[0] < 1:
            raise ContractError("a layer needs at least one inducing point")
        if not np.all(np.isfinite(z)):
            raise ContractError("inducing inputs must be finite")
        if kernel.input_dim != z.shape[1]:
            raise DimensionError("kernel and inducing inputs disagree on width", [kernel.input_dim, z.shape])
        if mean.d_out != d_out or flow.d_out != d_out:
            raise DimensionError("mean/flow output width disagrees with the layer", [mean.d_out, flow.d_out, d_out])

        self.name = name
        self.d_in = z.shape[1]
        self.d_out = d_out
        self.m_inducing = z.shape[0]
        self.kernel = kernel
        self.mean = mean
        self.flow = flow
        self.jitter = jitter

        m = self.m_inducing
        self.z = Param(z, name=f"{name}.z")
        self.m_var = Param(np.zeros((m, d_out)), name=f"{name}.m_var")
        self.s_lower = Param(np.zeros((d_out, m, m)), name=f"{name}.s_lower")
        self.s_log_diag = Param(np.full((d_out, m), np.log(chol_scale)), name=f"{name}.s_log_diag")
        self._strict_lower = np.tril(np.ones((m, m)), k=-1)

    def s_chol(self, h: int) -> Var:
        """Lower Cholesky factor of S for output dimension h."""
        m = self.m_inducing
        lower = self.s_lower.constrained()[h] * ad.constant(self._strict_lower)
        diagonal = ad.exp(self.s_log_diag.constrained()[h])
        diagonal = ad.broadcast_to(ad.reshape(diagonal, (1, m)), (m, m)) * ad.eye(m)
        return lower + diagonal

    def prior_covariance(self) -> Var:
        """K(Z, Z) plus the jitter term (scaled by the signal variance)."""
        z = self.z.constrained()
        kzz = self.kernel.matrix(z, z)
        if self.jitter > 0.0:
            kzz = kzz + self.kernel.variance() * self.jitter * ad.eye(self.m_inducing)
        return kzz

    def set_variational(self, m_var: np.ndarray, s: Sequence[np.ndarray]):
        """Assign m and S (one M x M covariance per output dimension)."""
        m_var = np.asarray(m_var, dtype=np.float64).reshape(self.m_inducing, self.d_out)
        if len(s) != self.d_out:
            raise DimensionError("one covariance per output dimension is required", [len(s), self.d_out])
        lowers, log_diags = [], []
        for cov in s:
            chol = ad.cholesky(np.asarray(cov, dtype=np.float64)).value
            lowers.append(np.tril(chol, k=-1))
            log_diags.append(np.log(np.diagonal(chol)))
        self.m_var.assign(m_var)
        self.s_lower.assign(np.stack(lowers))
        self.s_log_diag.assign(np.stack(log_diags))

    def params(self) -> List[Param]:
        return [self.z, self.m_var, self.s_lower, self.s_log_diag] + self.kernel.params() + self.flow.params()

    def __repr__(self) -> str:
        return (
            f"LayerState({self.name}, d_in={self.d_in}, d_out={self.d_out}, "
            f"M={self.m_inducing}, flow={self.flow.spec})"
        )


def conditional(x_in: ArrayLike, layer: LayerState) -> Tuple[Var, Var]:
    """
    Marginals of q(f(x)) at every row of ``x_in``.

    mu = m(x) + alpha^T (m_var - m(Z)), var = k(x,x) - alpha^T (Kzz - S) alpha,
    with alpha = Kzz^{-1} Kzx; returned as two [B x D_out] matrices.
    """
    x = ad.as_var(x_in)
    if x.ndim != 2 or x.shape[1] != layer.d_in:
        raise DimensionError(f"{layer.name}: input width mismatch", [x.shape, layer.d_in])
    if not np.all(np.isfinite(x.value)):
        raise ContractError(f"{layer.name}: non-finite layer inputs")

    z = layer.z.constrained()
    lz = ad.cholesky(layer.prior_covariance())
    kzx = layer.kernel.matrix(z, x)
    a = ad.tri_solve(lz, kzx)
    alpha = ad.tri_solve(lz, a, side="lower_transposed")

    mu = mean_apply(x, layer.mean) + alpha.T @ (layer.m_var.constrained() - mean_apply(z, layer.mean))

    n = x.shape[0]
    base = layer.kernel.diag(x) - ad.vsum(ad.square(a), axis=0)
    columns = []
    for h in range(layer.d_out):
        projected = layer.s_chol(h).T @ alpha
        var_h = ad.clamp_min(base + ad.vsum(ad.square(projected), axis=0), VARIANCE_FLOOR)
        columns.append(ad.reshape(var_h, (n, 1)))
    var = columns[0] if len(columns) == 1 else ad.concat(columns, axis=1)
    return mu, var


def sample_layer(mu: ArrayLike, var: ArrayLike, eps: ArrayLike) -> Var:
    """Reparameterized draw mu + sqrt(var) * eps."""
    mu, var, eps = ad.as_var(mu), ad.as_var(var), ad.as_var(eps)
    if not (mu.shape == var.shape == eps.shape):
        raise DimensionError("sample_layer: mu, var and eps must share a shape", [mu.shape, var.shape, eps.shape])
    return mu + ad.sqrt(var) * eps


def warp(f0: ArrayLike, layer: LayerState, coeffs: FlowParams) -> Var:
    if [s.kind for s in coeffs.steps] != [s.kind for s in layer.flow.steps]:
        raise ContractError(f"{layer.name}: coefficients were built for a different flow")
    return flow_forward(f0, coeffs)


def kl_u(layer: LayerState) -> Var:
    """Sum over output dimensions of KL(N(m_h, S_h) || N(m(Z)_h, Kzz))."""
    z = layer.z.constrained()
    lz = ad.cholesky(layer.prior_covariance())
    logdet_k = ad.logdet_from_chol(lz)
    diff = mean_apply(z, layer.mean) - layer.m_var.constrained()
    m = layer.m_inducing

    total = None
    for h in range(layer.d_out):
        ls = layer.s_chol(h)
        trace = ad.vsum(ad.square(ad.tri_solve(lz, ls)))
        mahalanobis = ad.vsum(ad.square(ad.tri_solve(lz, diff[:, h:h + 1])))
        kl_h = 0.5 * (trace + mahalanobis - float(m) + logdet_k - ad.logdet_from_chol(ls))
        total = kl_h if total is None else total + kl_h
    return total


def init_inducing(x: np.ndarray, m: int, seed: int = 0) -> np.ndarray:
    """
    Inducing inputs from k-means centres of ``x``.

    With N <= M the inputs themselves are used, padded with jittered copies.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if m < 1:
        raise ContractError("need at least one inducing point")
    n = x.shape[0]
    if n <= m:
        rng = np.random.default_rng(seed)
        extra = x[rng.integers(0, n, size=m - n)] + 1e-3 * rng.standard_normal((m - n, x.shape[1]))
        return np.concatenate([x, extra], axis=0)
    k_means = KMeans(n_clusters=m, n_init=10, random_state=seed)
    k_means.fit(x)
    return k_means.cluster_centers_.astype(np.float64)


def build_layer(
    x_expected: np.ndarray,
    d_out: int,
    flow: FlowStack,
    m: int,
    final: bool,
    seed: int = 0,
    mean: Optional[MeanFn] = None,
    jitter: float = DEFAULT_JITTER,
    name: str = "layer",
) -> LayerState:
    """Initialize a layer around the inputs it is expected to receive."""
    x_expected = np.atleast_2d(np.asarray(x_expected, dtype=np.float64))
    z = init_inducing(x_expected, m, seed)
    if mean is None:
        mean = MeanFn.zero(d_out) if final else init_mean_function(x_expected, d_out)
    kernel = RbfArdParams(x_expected.shape[1], name=f"{name}.kernel")
    layer = LayerState(
        z, d_out, kernel, mean, flow,
        chol_scale=FINAL_CHOL_SCALE if final else INNER_CHOL_SCALE,
        jitter=jitter, name=name,
    )
    logger.debug(f"Initialized {layer}")
    return layer
