"""
Parameter Registry for tracking the trainable arrays of a model.
"""

from typing import Any, Dict, List, Optional
import logging

import numpy as np

from .autodiff import Param
from .errors import ContractError, DimensionError

logger = logging.getLogger(__name__)


class ParamRegistry:
    """
    Central registry of the Params owned by one model.

    Features:
    - Ordered registration with unique names
    - Raw-value snapshots and restores (checkpointing, optimizer state)
    - Gradient statistics per parameter (coverage and health monitoring)
    """

    def __init__(self):
        self._params: Dict[str, Param] = {}
        self._gradient_stats: Dict[str, Dict[str, Any]] = {}

    def register(self, param: Param) -> Param:
        """Register a parameter; names must be unique."""
        if param.name in self._params:
            raise ContractError(f"Parameter {param.name} already registered")
        self._params[param.name] = param
        self._gradient_stats[param.name] = self._empty_stats()
        logger.debug(f"Registered parameter: {param.name} {param.shape} ({param.transform})")
        return param

    @staticmethod
    def _empty_stats() -> Dict[str, Any]:
        return {
            "steps": 0,
            "nonzero_steps": 0,
            "last_grad_norm": 0.0,
            "max_grad_norm": 0.0,
        }

    def get(self, name: str) -> Optional[Param]:
        return self._params.get(name)

    def list_params(self) -> List[Param]:
        return list(self._params.values())

    def names(self) -> List[str]:
        return list(self._params.keys())

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self._params.values())

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def total_size(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def values(self) -> Dict[str, np.ndarray]:
        """Snapshot of every raw value (plain arrays, safe to hand to other workers)."""
        return {name: p.raw.value.copy() for name, p in self._params.items()}

    def load_values(self, values: Dict[str, np.ndarray], strict: bool = True):
        """Restore raw values from a snapshot."""
        missing = [name for name in self._params if name not in values]
        if strict and missing:
            raise ContractError(f"Snapshot is missing parameters: {', '.join(missing)}")
        for name, param in self._params.items():
            if name not in values:
                continue
            value = np.asarray(values[name], dtype=np.float64)
            if value.shape != param.shape:
                raise DimensionError(f"Snapshot shape mismatch for {name}", [param.shape, value.shape])
            param.raw.value = value.copy()

    def zero_grads(self):
        for param in self._params.values():
            param.zero_grad()

    def record_gradients(self):
        """Update gradient statistics from the current ``grad`` of every parameter."""
        for name, param in self._params.items():
            norm = float(np.linalg.norm(param.grad))
            stats = self._gradient_stats[name]
            stats["steps"] += 1
            stats["last_grad_norm"] = norm
            stats["max_grad_norm"] = max(stats["max_grad_norm"], norm)
            if norm > 0.0:
                stats["nonzero_steps"] += 1

    def get_gradient_statistics(self, name: str = None) -> Dict[str, Any]:
        if name:
            return dict(self._gradient_stats.get(name, {}))
        return {key: dict(value) for key, value in self._gradient_stats.items()}

    def uncovered(self) -> List[str]:
        """Parameters that never received a nonzero gradient."""
        return [
            name for name, stats in self._gradient_stats.items()
            if stats["nonzero_steps"] == 0
        ]

    def summary(self) -> Dict[str, Any]:
        """Summary of all parameters and their gradient health."""
        summary = {
            "total_params": len(self._params),
            "total_size": self.total_size(),
            "transforms": {},
            "uncovered": self.uncovered(),
            "params": [],
        }
        for name, param in self._params.items():
            summary["transforms"][param.transform] = summary["transforms"].get(param.transform, 0) + 1
            summary["params"].append({
                "name": name,
                "shape": list(param.shape),
                "transform": param.transform,
                "statistics": dict(self._gradient_stats[name]),
            })
        return summary
