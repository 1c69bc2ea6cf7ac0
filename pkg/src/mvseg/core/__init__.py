"""Minimal tensor algebra, layers, optimizer and gradient checking."""

from .gradcheck import grad_check
from .nn import batch_norm, conv2d, dropout, global_avg_pool, group_norm, maxpool2, upconv2
from .optim import AdamState, adam_step
from .tensor import (
    Tensor,
    concat,
    default_dtype,
    diagonal,
    exp,
    log,
    logsumexp,
    no_grad,
    relu,
    sigmoid,
    sqrt,
)

__all__ = [
    "AdamState",
    "Tensor",
    "adam_step",
    "batch_norm",
    "concat",
    "conv2d",
    "default_dtype",
    "diagonal",
    "dropout",
    "exp",
    "global_avg_pool",
    "grad_check",
    "group_norm",
    "log",
    "logsumexp",
    "maxpool2",
    "no_grad",
    "relu",
    "sigmoid",
    "sqrt",
    "upconv2",
]
