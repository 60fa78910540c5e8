"""
Core components: autodiff engine, kernels, flows, layers, model and trainer.
"""

from .autodiff import Param, Tape, Var, backward, finite_diff_grad
from .kernels import MeanFn, RbfArdParams
from .flows import FlowSpec, FlowStack
from .svgp_layer import LayerState
from .model import DTGPModel, ModelConfig, PredictiveMixture
from .noise import NoiseSource
from .param_registry import ParamRegistry
from .flow_registry import FlowRegistry, get_global_flow_registry
from .trainer import Adam, TrainConfig, Trainer, evaluate, fit, time_iterations

__all__ = [
    "Param",
    "Tape",
    "Var",
    "backward",
    "finite_diff_grad",
    "MeanFn",
    "RbfArdParams",
    "FlowSpec",
    "FlowStack",
    "LayerState",
    "DTGPModel",
    "ModelConfig",
    "PredictiveMixture",
    "NoiseSource",

    "ParamRegistry",
    "FlowRegistry",
    "get_global_flow_registry",
    "Adam",
    "TrainConfig",
    "Trainer",
    "evaluate",
    "fit",
    "time_iterations"
]
