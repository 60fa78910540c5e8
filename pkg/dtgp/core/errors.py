"""
Exception hierarchy shared by the dtgp package.
"""

from typing import Any, List, Optional, Sequence


class DTGPError(Exception):
    """Base class for all errors raised by the package."""


class DimensionError(DTGPError, ValueError):
    """Raised when array shapes are incompatible for an operation."""

    def __init__(self, message: str, shapes: Sequence[Any] = ()):
        self.message = message
        self.shapes = tuple(shapes)
        shape_info = f" (shapes: {', '.join(str(s) for s in self.shapes)})" if self.shapes else ""
        super().__init__(f"{message}{shape_info}")


class DomainError(DTGPError, ValueError):
    """Raised when a value falls outside the domain of an operation."""

    def __init__(self, message: str, op: Optional[str] = None):
        self.message = message
        self.op = op
        op_info = f"{op}: " if op else ""
        super().__init__(f"{op_info}{message}")


class DecompositionError(DTGPError, ArithmeticError):
    """Raised when a Cholesky factorization fails after jitter escalation."""

    def __init__(self, message: str, pivot: int, jitter: float = 0.0):
        self.message = message
        self.pivot = pivot
        self.jitter = jitter
        super().__init__(f"{message} (failing pivot: {pivot}, last jitter: {jitter:.3e})")


class SingularityError(DTGPError, ArithmeticError):
    """Raised when a triangular system has a zero on its diagonal."""

    def __init__(self, message: str, index: int):
        self.message = message
        self.index = index
        super().__init__(f"{message} (zero diagonal at index {index})")


class ConvergenceError(DTGPError, ArithmeticError):
    """Raised when an iterative solver hits its iteration cap."""

    def __init__(self, message: str, residual: float, iterations: int):
        self.message = message
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{message} (worst residual {residual:.3e} after {iterations} iterations)")


class ContractError(DTGPError, ValueError):
    """Raised when a documented precondition is violated by the caller."""


class IngestionError(DTGPError, ValueError):
    """Raised when a data file cannot be turned into a Dataset."""

    def __init__(self, message: str, path: Any = None, line: Optional[int] = None):
        self.message = message
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f" [{path}" + (f", line {line}]" if line is not None else "]")
        super().__init__(f"{message}{location}")


class ConfigurationError(DTGPError, ValueError):
    """Raised when a configuration fails validation."""

    def __init__(self, errors: List[str], source: Optional[str] = None):
        self.errors = list(errors)
        self.source = source
        origin = f" in {source}" if source else ""
        super().__init__(f"Invalid configuration{origin}: " + "; ".join(self.errors))


class CheckpointError(DTGPError):
    """Raised when a checkpoint cannot be read or has an unknown format."""


class TrainingAborted(DTGPError):
    """Raised by fit() when a run stops early; keeps the metrics gathered so far."""

    def __init__(self, message: str, metrics: list, original_error: Exception = None):
        self.message = message
        self.metrics = metrics
        self.original_error = original_error
        super().__init__(f"Training aborted after {len(metrics)} metric rows: {message}")
