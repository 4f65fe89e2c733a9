"""Dense tensors with reverse-mode automatic differentiation."""

from .functional import (
    conv2d,
    conv_transpose2d,
    fft2,
    ifft2,
    pad2d,
    real_part,
    rescaled_layer_norm,
    softmax,
    window_merge,
    window_partition,
)
from .gradcheck import gradcheck, numerical_grad
from .rng import RngState
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    abs_,
    as_tensor,
    backward,
    clamp_min,
    concat,
    exp,
    is_grad_enabled,
    log,
    matmul,
    mean,
    no_grad,
    relu,
    sqrt,
    stack,
    tsum,
)

__all__ = [
    "NonFiniteError",
    "RngState",
    "ShapeError",
    "Tensor",
    "abs_",
    "as_tensor",
    "backward",
    "clamp_min",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "exp",
    "fft2",
    "gradcheck",
    "ifft2",
    "is_grad_enabled",
    "log",
    "matmul",
    "mean",
    "no_grad",
    "numerical_grad",
    "pad2d",
    "real_part",
    "relu",
    "rescaled_layer_norm",
    "softmax",
    "sqrt",
    "stack",
    "tsum",
    "window_merge",
    "window_partition",
]
