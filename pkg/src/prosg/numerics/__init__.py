"""Tensor autodiff, MLP blocks, Adam, checkpoints, and the gradient oracle."""

from . import checkpoint, nn, optim
from .gradcheck import finite_difference_check
from .optim import Adam
from .tensor import (
    Tensor,
    astensor,
    backward,
    broadcast_to,
    concat,
    constant,
    conv2d,
    cos,
    default_dtype,
    exp,
    gather,
    log,
    matmul,
    no_grad,
    parameter,
    relu,
    set_default_dtype,
    sigmoid,
    sin,
    softplus,
    square,
    using_dtype,
)

__all__ = [
    "Adam",
    "Tensor",
    "astensor",
    "backward",
    "broadcast_to",
    "checkpoint",
    "concat",
    "constant",
    "conv2d",
    "cos",
    "default_dtype",
    "exp",
    "finite_difference_check",
    "gather",
    "log",
    "matmul",
    "nn",
    "no_grad",
    "optim",
    "parameter",
    "relu",
    "set_default_dtype",
    "sigmoid",
    "sin",
    "softplus",
    "square",
    "using_dtype",
]
