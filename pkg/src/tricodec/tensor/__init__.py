"""Dense arrays with reverse-mode autodiff, layers, and checkpointing."""

from .core import (
    Tensor,
    astensor,
    parameter,
    no_grad,
    set_default_dtype,
    default_dtype,
    set_finite_checks,
    add,
    sub,
    mul,
    div,
    exp,
    log,
    sqrt,
    abs_,
    clamp,
    relu,
    sigmoid,
    silu,
    tanh,
    softplus,
    matmul,
    softmax,
    reshape,
    transpose,
    broadcast_to,
    getitem,
    concat,
    stack,
    sum_,
    mean_,
)
from .ops import (
    conv2d,
    conv3d,
    upsample_nearest2d,
    scatter_add,
    splat,
    segment_max,
    group_norm,
    mse_loss,
    l1_loss,
)
from .gradcheck import gradcheck, assert_gradcheck, GradcheckReport
from . import nn, checkpoint

__all__ = [
    "Tensor", "astensor", "parameter", "no_grad", "set_default_dtype",
    "default_dtype", "set_finite_checks",
    "add", "sub", "mul", "div", "exp", "log", "sqrt", "abs_", "clamp",
    "relu", "sigmoid", "silu", "tanh", "softplus", "matmul", "softmax",
    "reshape", "transpose", "broadcast_to", "getitem", "concat", "stack",
    "sum_", "mean_",
    "conv2d", "conv3d", "upsample_nearest2d", "scatter_add", "splat",
    "segment_max", "group_norm", "mse_loss", "l1_loss",
    "gradcheck", "assert_gradcheck", "GradcheckReport",
    "nn", "checkpoint",
]
