"""Minimal numpy-backed differentiable-computation core.

Tape-recorded reverse-mode autodiff, the handful of layer types the
enhancement models need, MSE/BCE losses, Adam, finite-difference gradient
checking, and a versioned binary checkpoint format.
"""

from dne.nncore.tensor import Tensor, astensor, concat, no_grad, pad_axis
from dne.nncore.layers import (
    BatchNorm,
    BiLstm,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Dropout,
    Lstm,
    Module,
    ModuleList,
)
from dne.nncore.losses import bce_loss, mse_loss
from dne.nncore.optim import Adam, ParameterStore, adam_step
from dne.nncore.gradcheck import grad_check
from dne.nncore.checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Tensor",
    "astensor",
    "concat",
    "no_grad",
    "pad_axis",
    "Module",
    "ModuleList",
    "Dense",
    "Lstm",
    "BiLstm",
    "Conv2d",
    "ConvTranspose2d",
    "BatchNorm",
    "Dropout",
    "mse_loss",
    "bce_loss",
    "ParameterStore",
    "Adam",
    "adam_step",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]
