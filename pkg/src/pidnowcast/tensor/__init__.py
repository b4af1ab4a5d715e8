"""Minimal dense-tensor reverse-mode autodiff engine."""

from .autograd import (ContractError, ShapeError, Tensor, grad, no_grad, nondiff,
                       stop_gradient, tensor)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .nn import Conv2d, ConvTranspose2d, Embedding, LayerNorm, Linear, Module, Parameter
from .optim import Adam, AdamState, optimizer_step

__all__ = [
    "Adam", "AdamState", "CheckpointError", "ContractError", "Conv2d", "ConvTranspose2d",
    "Embedding", "LayerNorm", "Linear", "Module", "Parameter", "ShapeError", "Tensor",
    "grad", "grad_check", "load_checkpoint", "no_grad", "nondiff", "optimizer_step",
    "save_checkpoint", "stop_gradient", "tensor",
]
