"""Minimal float64 tensor core with tape-based reverse-mode differentiation."""

from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .functional import (
    avg_pool,
    conv2d,
    cross_entropy,
    global_avg_pool,
    l2_normalize,
    log_softmax,
    softmax,
    upsample_nearest,
)
from .gradcheck import analytic_grad, grad_check, numeric_grad
from .nn import MLP, Conv2d, Linear, Module
from .optim import Adam
from .tensor import Tape, Tensor, backward, current_tape

__all__ = [
    "Adam",
    "Conv2d",
    "Linear",
    "MLP",
    "Module",
    "Tape",
    "Tensor",
    "analytic_grad",
    "avg_pool",
    "backward",
    "conv2d",
    "cross_entropy",
    "current_tape",
    "functional",
    "global_avg_pool",
    "grad_check",
    "l2_normalize",
    "load_checkpoint",
    "log_softmax",
    "numeric_grad",
    "save_checkpoint",
    "softmax",
    "upsample_nearest",
]
