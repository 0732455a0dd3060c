"""Tensor math, reverse-mode gradients, Adam, and gradient checking."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import grad_check, relative_error
from .optim import Adam, AdamState, adam_step, linear_warmup_decay
from .tensor import (
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    concat,
    cosine,
    dropout,
    exp,
    gelu,
    grad_enabled,
    layer_norm,
    log,
    masked_cross_entropy,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    row_softmax,
    sqrt,
    sub,
    sum_,
    swapaxes,
    take,
    take_along,
    tanh,
    transpose,
)

__all__ = [
    "Adam",
    "AdamState",
    "CheckpointError",
    "NonFiniteError",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "concat",
    "cosine",
    "dropout",
    "exp",
    "gelu",
    "grad_check",
    "grad_enabled",
    "layer_norm",
    "linear_warmup_decay",
    "load_checkpoint",
    "log",
    "masked_cross_entropy",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "relative_error",
    "relu",
    "reshape",
    "row_softmax",
    "save_checkpoint",
    "sqrt",
    "sub",
    "sum_",
    "swapaxes",
    "take",
    "take_along",
    "tanh",
    "transpose",
]
