"""
Deep Transformed Gaussian Processes

Stacks of sparse variational GP layers whose hidden samples are warped by
monotone normalizing flows, trained by doubly-stochastic variational inference.
"""

__version__ = "1.0.0"
__author__ = "DTGP Team"

from .core.model import DTGPModel, ModelConfig, PredictiveMixture
from .core.flows import FlowSpec
from .core.trainer import TrainConfig, evaluate, fit
from .core.checkpoint import load_checkpoint, save_checkpoint

from .data.datasets import Dataset, gen_toy_step, load_csv, make_split, standardize
from .utils.config_loader import ConfigLoader

__all__ = [
    "DTGPModel",
    "ModelConfig",
    "PredictiveMixture",
    "FlowSpec",
    "TrainConfig",
    "evaluate",
    "fit",
    "load_checkpoint",
    "save_checkpoint",

    "Dataset",
    "gen_toy_step",
    "load_csv",
    "make_split",
    "standardize",
    "ConfigLoader"
]
