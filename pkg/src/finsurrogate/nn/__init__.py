"""Small deterministic float64 CNN toolkit: kernels, layers, optimizers, checks."""

from .functional import mse_loss
from .gradcheck import grad_check
from .io import dumps_weights, load_into, loads_weights
from .layers import LayerSpec, Network, NetworkSpec, SpecError
from .optim import OptimizerError, OptimizerState, adam_step, sgd_step

__all__ = [
    "LayerSpec",
    "Network",
    "NetworkSpec",
    "OptimizerError",
    "OptimizerState",
    "SpecError",
    "adam_step",
    "dumps_weights",
    "grad_check",
    "load_into",
    "loads_weights",
    "mse_loss",
    "sgd_step",
]
