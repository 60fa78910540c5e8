"""
Utility functions and helpers for the package.
"""

from .config_loader import ConfigLoader

__all__ = [
    "ConfigLoader"
]
