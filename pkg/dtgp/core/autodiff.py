"""
Reverse-mode automatic differentiation over dense float64 arrays.

The engine is define-by-run: every operation on a :class:`Var` creates a new
node that remembers its parents and a closure mapping the output gradient to
the parent gradients. :func:`backward` walks the graph from a scalar root in
reverse topological order.

Broadcasting is deliberately narrow: binary elementwise operations accept
either equal shapes or a single-element operand. Anything else must go
through the explicit :func:`broadcast_to` / :func:`tile_rows` operations.
"""

from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
import itertools
import logging
import threading

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dpotrf
from scipy.special import expit

from .errors import (
    ContractError,
    DecompositionError,
    DimensionError,
    DomainError,
    SingularityError,
)

logger = logging.getLogger(__name__)

_node_ids = itertools.count()
_tape_ids = itertools.count()
_local = threading.local()

# Relative jitter ladder used when a factorization fails: 1e-6 .. 1e-2 of mean(diag).
JITTER_LADDER = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def _tape_stack() -> List["Tape"]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Optional["Tape"]:
    """Return the innermost active tape of the calling thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """
    Record of the nodes created while the tape is active.

    Tapes are confined to the thread that entered them. Recording is only
    needed for the debug dump; gradients never depend on it.
    """

    def __init__(self, name: str = "tape", verbose: bool = False):
        self.name = name
        self.verbose = verbose
        self.tape_id = next(_tape_ids)
        self.nodes: List["Var"] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _tape_stack().pop()
        if self.verbose and logger.isEnabledFor(logging.DEBUG):
            logger.debug(f"Tape {self.name} ({len(self.nodes)} nodes):\n{self.dump()}")

    def record(self, var: "Var"):
        self.nodes.append(var)

    def dump(self) -> str:
        """Plain-text op list, one node per line."""
        lines = []
        for var in self.nodes:
            parents = ",".join(f"#{p.node_id}" for p in var._parents)
            label = f" [{var.name}]" if var.name else ""
            lines.append(f"#{var.node_id} {var.op}{label} {tuple(var.shape)} <- {parents or '-'}")
        return "\n".join(lines)

    def __len__(self) -> int:
        return len(self.nodes)


class Var:
    """A differentiable array node."""

    __slots__ = (
        "value", "grad", "_parents", "_backward", "op",
        "node_id", "tape_id", "requires_grad", "name",
    )

    # Make numpy defer to our reflected operators (ndarray * Var -> Var.__rmul__).
    __array_ufunc__ = None

    def __init__(
        self,
        value,
        parents: Sequence["Var"] = (),
        backward: Optional[BackwardFn] = None,
        op: str = "const",
        requires_grad: Optional[bool] = None,
        name: Optional[str] = None,
    ):
        self.value = np.array(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(parents)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self._parents)
        self.requires_grad = requires_grad
        # Constant subgraphs do not keep their closures alive.
        self._backward = backward if requires_grad else None
        self.op = op
        self.name = name
        self.node_id = next(_node_ids)
        tape = current_tape()
        self.tape_id = tape.tape_id if tape is not None else None
        if tape is not None:
            tape.record(self)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> "Var":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.size == 1 else float("nan")

    def sum(self, axis: Optional[int] = None) -> "Var":
        return vsum(self, axis)

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return getitem(self, index)

    def __repr__(self) -> str:
        return f"Var(#{self.node_id}, op={self.op}, shape={self.shape})"


ArrayLike = Union[Var, np.ndarray, float, int]


def as_var(x: ArrayLike) -> Var:
    """Wrap arrays and numbers into constant nodes."""
    if isinstance(x, Var):
        return x
    return Var(x, op="const", requires_grad=False)


def constant(x) -> Var:
    return Var(x, op="const", requires_grad=False)


def eye(n: int) -> Var:
    return constant(np.eye(n))


def _make(value, parents, backward: BackwardFn, op: str) -> Var:
    return Var(value, parents=parents, backward=backward, op=op)


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------

def _result_shape(a: Var, b: Var, op: str) -> Tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if b.size == 1:
        return a.shape
    if a.size == 1:
        return b.shape
    raise DimensionError(f"{op}: operands must share a shape or one must be a scalar", [a.shape, b.shape])


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Fold a gradient back onto a scalar operand that was broadcast."""
    if g.shape == shape:
        return g
    return np.asarray(np.sum(g)).reshape(shape)


def _binary(a: ArrayLike, b: ArrayLike, op: str):
    a, b = as_var(a), as_var(b)
    _result_shape(a, b, op)
    return a, b


def add(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = _binary(a, b, "add")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.value + b.value, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = _binary(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(a.value - b.value, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = _binary(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.value, a.shape), _reduce_to(g * a.value, b.shape)

    return _make(a.value * b.value, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = _binary(a, b, "div")

    def backward(g):
        return (
            _reduce_to(g / b.value, a.shape),
            _reduce_to(-g * a.value / (b.value * b.value), b.shape),
        )

    return _make(a.value / b.value, (a, b), backward, "div")


def neg(a: ArrayLike) -> Var:
    a = as_var(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def exp(a: ArrayLike) -> Var:
    a = as_var(a)
    value = np.exp(a.value)
    return _make(value, (a,), lambda g: (g * value,), "exp")


def log(a: ArrayLike) -> Var:
    a = as_var(a)
    if np.any(a.value <= 0.0):
        raise DomainError(f"log of nonpositive value (min {np.min(a.value):.3e})", op="log")
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def tanh(a: ArrayLike) -> Var:
    a = as_var(a)
    value = np.tanh(a.value)
    return _make(value, (a,), lambda g: (g * (1.0 - value * value),), "tanh")


def asinh(a: ArrayLike) -> Var:
    a = as_var(a)
    return _make(
        np.arcsinh(a.value), (a,), lambda g: (g / np.sqrt(1.0 + a.value * a.value),), "asinh"
    )


def softplus(a: ArrayLike) -> Var:
    a = as_var(a)
    return _make(np.logaddexp(0.0, a.value), (a,), lambda g: (g * expit(a.value),), "softplus")


def square(a: ArrayLike) -> Var:
    a = as_var(a)
    return _make(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,), "square")


def sqrt(a: ArrayLike) -> Var:
    a = as_var(a)
    if np.any(a.value < 0.0):
        raise DomainError("sqrt of negative value", op="sqrt")
    value = np.sqrt(a.value)
    return _make(value, (a,), lambda g: (g / (2.0 * value),), "sqrt")


def clamp_min(a: ArrayLike, floor: float) -> Var:
    """max(a, floor); the gradient is blocked where the floor is active."""
    a = as_var(a)
    mask = a.value > floor
    return _make(np.where(mask, a.value, floor), (a,), lambda g: (g * mask,), "clamp_min")


_ELEMENTWISE: Dict[str, Callable[..., Var]] = {
    "exp": exp, "log": log, "tanh": tanh, "asinh": asinh, "softplus": softplus,
    "square": square, "sqrt": sqrt, "neg": neg,
    "add": add, "sub": sub, "mul": mul, "div": div,
}


def elementwise(op: str, *args: ArrayLike) -> Var:
    """Dispatch an elementwise operation by name."""
    if op not in _ELEMENTWISE:
        raise ContractError(f"Unknown elementwise op: {op}")
    return _ELEMENTWISE[op](*args)


# ---------------------------------------------------------------------------
# Structural operations
# ---------------------------------------------------------------------------

def _require_matrix(a: Var, op: str):
    if a.ndim != 2:
        raise DimensionError(f"{op}: expected a 2-D array", [a.shape])


def matmul(a: ArrayLike, b: ArrayLike) -> Var:
    a, b = as_var(a), as_var(b)
    _require_matrix(a, "matmul")
    _require_matrix(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise DimensionError("matmul: inner dimensions differ", [a.shape, b.shape])

    def backward(g):
        return g @ b.value.T, a.value.T @ g

    return _make(a.value @ b.value, (a, b), backward, "matmul")


def transpose(a: ArrayLike) -> Var:
    a = as_var(a)
    _require_matrix(a, "transpose")
    return _make(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: ArrayLike, shape: Sequence[int]) -> Var:
    a = as_var(a)
    original = a.shape
    try:
        value = a.value.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"reshape: {e}", [original, tuple(shape)])
    return _make(value.copy(), (a,), lambda g: (g.reshape(original),), "reshape")


def vsum(a: ArrayLike, axis: Optional[int] = None) -> Var:
    """Sum of all entries (axis=None) or along one axis."""
    a = as_var(a)

    def backward(g):
        if axis is None:
            return (np.full(a.shape, float(np.asarray(g).reshape(-1)[0])),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.sum(a.value, axis=axis), (a,), backward, "sum")


def mean(a: ArrayLike) -> Var:
    a = as_var(a)
    return vsum(a) / float(a.size)


def getitem(a: ArrayLike, index) -> Var:
    a = as_var(a)
    value = a.value[index]

    def backward(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(value, copy=True), (a,), backward, "getitem")


def concat(items: Sequence[ArrayLike], axis: int = 0) -> Var:
    items = [as_var(v) for v in items]
    if not items:
        raise DimensionError("concat: nothing to concatenate")
    try:
        value = np.concatenate([v.value for v in items], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}", [v.shape for v in items])
    splits = np.cumsum([v.shape[axis] for v in items])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(value, items, backward, "concat")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def broadcast_to(a: ArrayLike, shape: Sequence[int]) -> Var:
    """Explicit numpy-style broadcast; the backward pass sums the copies."""
    a = as_var(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        value = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise DimensionError("broadcast_to: incompatible target shape", [a.shape, shape])
    return _make(value, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def tile_rows(a: ArrayLike, reps: int) -> Var:
    """Stack ``reps`` copies of a matrix on top of each other."""
    a = as_var(a)
    _require_matrix(a, "tile_rows")
    if reps == 1:
        return a
    n, k = a.shape
    return _make(
        np.tile(a.value, (reps, 1)), (a,),
        lambda g: (g.reshape(reps, n, k).sum(axis=0),), "tile_rows",
    )


def diag_part(a: ArrayLike) -> Var:
    a = as_var(a)
    _require_matrix(a, "diag_part")
    return _make(np.diagonal(a.value).copy(), (a,), lambda g: (np.diag(g),), "diag_part")


def scaled_sqdist(x1: ArrayLike, x2: ArrayLike, lengthscales: ArrayLike) -> Var:
    """
    Pairwise ARD-scaled squared distances.

    Entry (i, j) is sum_d (x1[i, d] - x2[j, d])**2 / l[d]**2. Fused so that the
    backward pass never materialises the n x m x D difference tensor.
    """
    x1, x2, ls = as_var(x1), as_var(x2), as_var(lengthscales)
    _require_matrix(x1, "scaled_sqdist")
    _require_matrix(x2, "scaled_sqdist")
    if x1.shape[1] != x2.shape[1] or ls.shape != (x1.shape[1],):
        raise DimensionError("scaled_sqdist: feature dimensions differ", [x1.shape, x2.shape, ls.shape])

    a = x1.value / ls.value
    b = x2.value / ls.value
    diff = a[:, None, :] - b[None, :, :]
    value = np.einsum("ijd,ijd->ij", diff, diff)

    def backward(g):
        inv2 = 1.0 / (ls.value * ls.value)
        row = g.sum(axis=1)
        col = g.sum(axis=0)
        g_x2 = g @ x2.value
        grad_x1 = 2.0 * inv2 * (x1.value * row[:, None] - g_x2)
        grad_x2 = 2.0 * inv2 * (x2.value * col[:, None] - g.T @ x1.value)
        weighted = row @ (x1.value ** 2) + col @ (x2.value ** 2) - 2.0 * np.sum(x1.value * g_x2, axis=0)
        grad_ls = -2.0 * weighted / ls.value ** 3
        return grad_x1, grad_x2, grad_ls

    return _make(value, (x1, x2, ls), backward, "scaled_sqdist")


# ---------------------------------------------------------------------------
# Matrix calculus
# ---------------------------------------------------------------------------

def _phi(a: np.ndarray) -> np.ndarray:
    """Lower triangle with the diagonal halved."""
    out = np.tril(a)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def _potrf(a: np.ndarray) -> Tuple[np.ndarray, int]:
    factor, info = dpotrf(a, lower=1, clean=1)
    return factor, int(info)


def cholesky(a: ArrayLike) -> Var:
    """
    Lower Cholesky factor of a symmetric positive definite matrix.

    Only the lower triangle of ``a`` is read. A failed factorization is retried
    with jitter 1e-6 .. 1e-2 times mean(diag) before raising.
    """
    a = as_var(a)
    _require_matrix(a, "cholesky")
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionError("cholesky: matrix must be square", [a.shape])
    if not np.all(np.isfinite(a.value)):
        bad = int(np.argwhere(~np.isfinite(a.value))[0][0])
        raise DecompositionError("cholesky: non-finite entries", pivot=bad)

    factor, info = _potrf(a.value)
    jitter = 0.0
    if info != 0:
        scale = float(np.mean(np.abs(np.diagonal(a.value)))) or 1.0
        for ratio in JITTER_LADDER:
            jitter = ratio * scale
            factor, info = _potrf(a.value + jitter * np.eye(n))
            if info == 0:
                logger.warning(f"Cholesky needed jitter {jitter:.3e} on a {n}x{n} matrix")
                break
        else:
            raise DecompositionError("cholesky: matrix not positive definite", pivot=info - 1, jitter=jitter)

    def backward(g):
        p = _phi(factor.T @ g)
        left = solve_triangular(factor, p + p.T, lower=True, trans="T")
        full = solve_triangular(factor, left.T, lower=True, trans="T").T
        return (_phi(full),)

    return _make(factor, (a,), backward, "cholesky")


def tri_solve(l: ArrayLike, b: ArrayLike, side: str = "lower") -> Var:
    """
    Solve l x = b (side='lower') or l^T x = b (side='lower_transposed') for a
    lower-triangular l.
    """
    l, b = as_var(l), as_var(b)
    _require_matrix(l, "tri_solve")
    _require_matrix(b, "tri_solve")
    if side not in ("lower", "lower_transposed"):
        raise ContractError(f"tri_solve: unknown side {side!r}")
    n = l.shape[0]
    if l.shape[1] != n or b.shape[0] != n:
        raise DimensionError("tri_solve: incompatible shapes", [l.shape, b.shape])
    diagonal = np.diagonal(l.value)
    zeros = np.flatnonzero(diagonal == 0.0)
    if zeros.size:
        raise SingularityError("tri_solve: singular triangular matrix", index=int(zeros[0]))

    transposed = side == "lower_transposed"
    x = solve_triangular(l.value, b.value, lower=True, trans=1 if transposed else 0)

    def backward(g):
        if transposed:
            grad_b = solve_triangular(l.value, g, lower=True, trans=0)
            grad_l = -np.tril(x @ grad_b.T)
        else:
            grad_b = solve_triangular(l.value, g, lower=True, trans=1)
            grad_l = -np.tril(grad_b @ x.T)
        return grad_l, grad_b

    return _make(x, (l, b), backward, "tri_solve")


def logdet_from_chol(l: ArrayLike) -> Var:
    """log det(L L^T) = 2 sum_i log L_ii."""
    l = as_var(l)
    _require_matrix(l, "logdet_from_chol")
    diagonal = np.diagonal(l.value).copy()
    if np.any(diagonal <= 0.0):
        raise DomainError("Cholesky factor has a nonpositive diagonal", op="logdet_from_chol")

    def backward(g):
        return (np.diag(2.0 * float(np.asarray(g).reshape(-1)[0]) / diagonal),)

    return _make(2.0 * np.sum(np.log(diagonal)), (l,), backward, "logdet")


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def _topological_order(root: Var) -> List[Var]:
    """Nodes reachable from root, root first, every node before its parents."""
    visited = set()
    order: List[Var] = []
    stack: List[Tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def backward(root: Var) -> Dict[Var, np.ndarray]:
    """
    Populate ``grad`` on every node reachable from a scalar root.

    Gradients accumulate into existing ``grad`` arrays; callers reset them
    between optimization steps (see :func:`zero_grads`). Returns the map from
    leaf nodes to their gradients.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}

    order = _topological_order(root)
    pending: Dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in order:
        g = pending.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    leaves: Dict[Var, np.ndarray] = {}
    for node in order:
        g = pending.get(id(node))
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if not node._parents:
            leaves[node] = node.grad
    return leaves


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        upper = float(f(x))
        flat[i] = original - h
        lower = float(f(x))
        flat[i] = original
        out[i] = (upper - lower) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def softplus_inverse(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


class Param:
    """
    A trainable array stored in unconstrained (raw) form.

    ``transform`` maps raw to constrained values: identity, softplus or exp.
    """

    TRANSFORMS = ("identity", "softplus", "exp")

    def __init__(self, value, transform: str = "identity", name: str = "param", raw: bool = False):
        if transform not in self.TRANSFORMS:
            raise ContractError(f"Unknown parameter transform: {transform}")
        self.transform = transform
        self.name = name
        value = np.array(value, dtype=np.float64)
        raw_value = value if raw else self._to_raw(value)
        self.raw = Var(raw_value, op="param", requires_grad=True, name=name)

    def _to_raw(self, value: np.ndarray) -> np.ndarray:
        if self.transform == "identity":
            return value
        if np.any(value <= 0.0):
            raise DomainError(f"parameter {self.name} must be strictly positive", op=self.transform)
        if self.transform == "softplus":
            return softplus_inverse(value)
        return np.log(value)

    def constrained(self) -> Var:
        """Constrained value as a node on the current tape."""
        if self.transform == "identity":
            return self.raw
        if self.transform == "softplus":
            return softplus(self.raw)
        return exp(self.raw)

    def numpy(self) -> np.ndarray:
        raw = self.raw.value
        if self.transform == "identity":
            return raw.copy()
        if self.transform == "softplus":
            return np.logaddexp(0.0, raw)
        return np.exp(raw)

    def assign(self, value, raw: bool = False):
        value = np.array(value, dtype=np.float64)
        if value.shape != self.raw.shape:
            raise DimensionError(f"cannot assign to parameter {self.name}", [self.raw.shape, value.shape])
        self.raw.value = value if raw else self._to_raw(value)

    @property
    def grad(self) -> np.ndarray:
        if self.raw.grad is None:
            return np.zeros_like(self.raw.value)
        return self.raw.grad

    def zero_grad(self):
        self.raw.grad = np.zeros_like(self.raw.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.raw.shape

    @property
    def size(self) -> int:
        return self.raw.size

    def __repr__(self) -> str:
        return f"Param(name='{self.name}', shape={self.shape}, transform='{self.transform}')"


def zero_grads(params: Sequence[Param]):
    for param in params:
        param.zero_grad()
