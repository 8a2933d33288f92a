"""Minimal NHWC tensor engine with reverse-mode autodiff."""
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    conv2d,
    grid_sample,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    silu,
    softmax,
    square,
    sub,
    sum_,
    tanh,
    transpose,
    upsample2x,
    zero_grad,
)
from .optim import Adam
from . import checkpoint

__all__ = [
    "Adam", "ShapeError", "Tensor", "add", "as_tensor", "backward", "checkpoint", "concat", "conv2d",
    "grid_sample", "matmul", "mean", "mul", "no_grad", "relu", "reshape", "silu", "softmax", "square",
    "sub", "sum_", "tanh", "transpose", "upsample2x", "zero_grad",
]
