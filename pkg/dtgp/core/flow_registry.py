"""
Registry of elementwise flow step kinds.
"""

from typing import Dict, List, Optional, Type
import logging

from .errors import ContractError

logger = logging.getLogger(__name__)


class FlowRegistry:
    """Maps flow kind names (as used in flow specification strings) to step classes."""

    def __init__(self):
        self._step_classes: Dict[str, Type] = {}

    def register_flow_class(self, name: str, step_class: Type) -> None:
        """Register a step class under a kind name."""
        self._step_classes[name] = step_class
        logger.debug(f"Registered flow step class: {name}")

    def get(self, name: str) -> Optional[Type]:
        return self._step_classes.get(name)

    def create_step(self, name: str, **kwargs):
        """Instantiate a registered step."""
        step_class = self._step_classes.get(name)
        if step_class is None:
            raise ContractError(
                f"Unknown flow kind '{name}' (available: {', '.join(self.list_flow_kinds())})"
            )
        return step_class(**kwargs)

    def list_flow_kinds(self) -> List[str]:
        return list(self._step_classes.keys())


global_flow_registry = FlowRegistry()


def get_global_flow_registry() -> FlowRegistry:
    """Get the global flow registry instance."""
    return global_flow_registry
