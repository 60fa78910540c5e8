"""
Covariance and mean functions for the GP prior of each layer.
"""

from abc import ABC, abstractmethod
from typing import List, Optional
import logging

import numpy as np

from . import autodiff as ad
from .autodiff import ArrayLike, Param, Var
from .errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

DEFAULT_LENGTHSCALE = 2.0
DEFAULT_VARIANCE = 1.0


class Kernel(ABC):
    """
    Base class for stationary covariance functions.

    New kernels implement ``matrix`` and ``diag`` on tape Vars and expose their
    Params through ``params``; the layers only rely on these three methods.
    """

    input_dim: int

    @abstractmethod
    def matrix(self, x1: ArrayLike, x2: ArrayLike) -> Var:
        """Cross-covariance K(x1, x2)."""
        pass

    @abstractmethod
    def diag(self, x: ArrayLike) -> Var:
        """Diagonal of K(x, x) as a vector."""
        pass

    @abstractmethod
    def params(self) -> List[Param]:
        pass

    def _check_inputs(self, *xs: Var):
        for x in xs:
            if x.ndim != 2 or x.shape[1] != self.input_dim:
                raise DimensionError(
                    f"{type(self).__name__} expects inputs with {self.input_dim} columns",
                    [x.shape],
                )


class RbfArdParams(Kernel):
    """
    Squared exponential kernel with one lengthscale per input dimension.

    k(x, x') = variance * exp(-0.5 * sum_d (x_d - x'_d)**2 / l_d**2)
    """

    def __init__(
        self,
        input_dim: int,
        variance: float = DEFAULT_VARIANCE,
        lengthscales=DEFAULT_LENGTHSCALE,
        name: str = "kernel",
    ):
        if input_dim < 1:
            raise ContractError("kernel input dimension must be at least 1")
        self.input_dim = input_dim
        lengthscales = np.broadcast_to(np.asarray(lengthscales, dtype=np.float64), (input_dim,)).copy()
        self.log_variance = Param(variance, transform="exp", name=f"{name}.variance")
        self.log_lengthscales = Param(lengthscales, transform="exp", name=f"{name}.lengthscales")

    def variance(self) -> Var:
        return self.log_variance.constrained()

    def lengthscales(self) -> Var:
        return self.log_lengthscales.constrained()

    def matrix(self, x1: ArrayLike, x2: ArrayLike) -> Var:
        x1, x2 = ad.as_var(x1), ad.as_var(x2)
        self._check_inputs(x1, x2)
        dist = ad.scaled_sqdist(x1, x2, self.lengthscales())
        return self.variance() * ad.exp(dist * -0.5)

    def diag(self, x: ArrayLike) -> Var:
        x = ad.as_var(x)
        self._check_inputs(x)
        return ad.broadcast_to(self.variance(), (x.shape[0],))

    def params(self) -> List[Param]:
        return [self.log_variance, self.log_lengthscales]

    def __repr__(self) -> str:
        return (
            f"RbfArdParams(variance={float(self.log_variance.numpy()):.4g}, "
            f"lengthscales={np.round(self.log_lengthscales.numpy(), 4).tolist()})"
        )


def kernel_matrix(x1: ArrayLike, x2: ArrayLike, p: Kernel) -> Var:
    return p.matrix(x1, x2)


def kernel_diag(x: ArrayLike, p: Kernel) -> Var:
    return p.diag(x)


class MeanFn:
    """
    Mean function of a layer: zero, or a fixed linear map x A + b.

    The linear weights are not trained; they carry the input forward through
    inner layers.
    """

    KINDS = ("zero", "linear")

    def __init__(
        self,
        kind: str,
        d_out: int,
        weights: Optional[np.ndarray] = None,
        bias: Optional[np.ndarray] = None,
    ):
        if kind not in self.KINDS:
            raise ContractError(f"Unknown mean function kind: {kind}")
        self.kind = kind
        self.d_out = d_out
        if kind == "linear":
            if weights is None:
                raise ContractError("linear mean function needs weights")
            weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
            bias = np.zeros(d_out) if bias is None else np.asarray(bias, dtype=np.float64).reshape(-1)
            if weights.shape[1] != d_out or bias.shape != (d_out,):
                raise DimensionError("linear mean: weights/bias disagree with d_out", [weights.shape, bias.shape])
            self.weights, self.bias = weights, bias
        else:
            self.weights, self.bias = None, None

    @classmethod
    def zero(cls, d_out: int) -> "MeanFn":
        return cls("zero", d_out)

    @classmethod
    def identity(cls, d: int) -> "MeanFn":
        return cls("linear", d, weights=np.eye(d))

    def __call__(self, x: ArrayLike) -> Var:
        return mean_apply(x, self)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "d_out": self.d_out,
            "weights": None if self.weights is None else self.weights.tolist(),
            "bias": None if self.bias is None else self.bias.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MeanFn":
        weights = data.get("weights")
        bias = data.get("bias")
        return cls(
            data["kind"], int(data["d_out"]),
            weights=None if weights is None else np.asarray(weights),
            bias=None if bias is None else np.asarray(bias),
        )


def mean_apply(x: ArrayLike, m: MeanFn) -> Var:
    x = ad.as_var(x)
    if x.ndim != 2:
        raise DimensionError("mean function expects a matrix input", [x.shape])
    if m.kind == "zero":
        return ad.constant(np.zeros((x.shape[0], m.d_out)))
    if x.shape[1] != m.weights.shape[0]:
        raise DimensionError("mean function input width mismatch", [x.shape, m.weights.shape])
    projected = ad.matmul(x, ad.constant(m.weights))
    return projected + ad.constant(np.broadcast_to(m.bias, projected.shape))


def init_mean_function(x: np.ndarray, d_out: int) -> MeanFn:
    """
    Linear mean for an inner layer.

    Identity when widths agree, the top right singular vectors of the inputs
    when shrinking, and identity padded with zero columns when growing.
    """
    d_in = x.shape[1]
    if d_in == d_out:
        weights = np.eye(d_in)
    elif d_in > d_out:
        _, _, vt = np.linalg.svd(x, full_matrices=False)
        weights = vt[:d_out, :].T
    else:
        weights = np.concatenate([np.eye(d_in), np.zeros((d_in, d_out - d_in))], axis=1)
    return MeanFn("linear", d_out, weights=weights)
