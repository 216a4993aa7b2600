"""Differentiable array core: autodiff primitives, optimizer, EMA, checkpoints."""

from .core import (
    DiffArray,
    ShapeError,
    absolute,
    accumulate_grad,
    add,
    asdiff,
    concat,
    conv2d,
    conv2d_out_hw,
    conv2d_transpose,
    div,
    exp,
    getitem,
    leaky_relu,
    log,
    make_node,
    matmul,
    mean_,
    mul,
    needs_grad,
    neg,
    no_grad,
    parameter,
    relu,
    reshape,
    resize_bilinear,
    resize_nearest,
    sigmoid,
    softmax,
    softplus,
    square,
    sub,
    sum_,
    tanh,
    transpose,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckResult, grad_check
from .optim import Adam, EmaShadow, OptimizerError

__all__ = [
    "Adam",
    "CheckpointError",
    "DiffArray",
    "EmaShadow",
    "GradCheckResult",
    "OptimizerError",
    "ShapeError",
    "absolute",
    "accumulate_grad",
    "add",
    "asdiff",
    "concat",
    "conv2d",
    "conv2d_out_hw",
    "conv2d_transpose",
    "div",
    "exp",
    "getitem",
    "grad_check",
    "leaky_relu",
    "load_checkpoint",
    "log",
    "make_node",
    "matmul",
    "mean_",
    "mul",
    "needs_grad",
    "neg",
    "no_grad",
    "parameter",
    "relu",
    "reshape",
    "resize_bilinear",
    "resize_nearest",
    "save_checkpoint",
    "sigmoid",
    "softmax",
    "softplus",
    "square",
    "sub",
    "sum_",
    "tanh",
    "transpose",
]
