"""Patch attentive neural processes on a small reverse-mode autodiff core."""

from .kernels import BACKEND
from .model import ModelConfig, NeuralProcess, build_model
from .rng import Rng
from .tasks import KernelConfig, TaskBatch
from .tensor import Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "KernelConfig",
    "ModelConfig",
    "NeuralProcess",
    "Rng",
    "TaskBatch",
    "Tensor",
    "backward",
    "build_model",
    "grad_check",
    "no_grad",
]
