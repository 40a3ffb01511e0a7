"""Reverse-mode autodiff over dense float tensors, with 3-D conv support."""

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check, numeric_gradient
from .kernels import BACKEND
from .nn import Conv3d, GroupNorm, Linear, Module, parameter
from .ops import (
    add,
    clip,
    concat,
    conv3d,
    elementwise,
    global_avg_pool,
    group_norm,
    linear,
    mse_loss,
    mul,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    silu,
    sub,
    upsample_nearest,
)
from .tensor import ComputationTape, Tensor, backward, no_grad

__all__ = [
    "BACKEND", "ComputationTape", "Conv3d", "GroupNorm", "Linear", "Module", "Tensor",
    "add", "backward", "clip", "concat", "conv3d", "elementwise", "global_avg_pool",
    "grad_check", "group_norm", "linear", "load_checkpoint", "mse_loss", "mul", "no_grad",
    "numeric_gradient", "ops", "parameter", "reduce_mean", "reduce_sum", "reshape",
    "save_checkpoint", "scale", "silu", "sub", "upsample_nearest",
]
