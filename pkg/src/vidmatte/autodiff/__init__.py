"""Minimal reverse-mode autodiff on numpy arrays."""
from .gradcheck import NonFiniteError, gradcheck
from .module import MLP, Conv2d, LayerNorm, Linear, Module
from .nn_ops import (
    bilinear_sample,
    conv2d,
    interpolation_matrix,
    layer_norm,
    resize_bilinear,
    sample_levels,
    softmax,
    upsample2x,
)
from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    abs_,
    add,
    as_tensor,
    broadcast_to,
    clip,
    concat,
    div,
    exp,
    grad_enabled,
    linear,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    note_kinks,
    power,
    record_kinks,
    relu,
    reshape,
    sigmoid,
    sqrt,
    stack,
    sub,
    swapaxes,
    tensor_sum,
    transpose,
)

DiffTensor = Tensor

__all__ = [
    "Conv2d",
    "DiffTensor",
    "LayerNorm",
    "Linear",
    "MLP",
    "Module",
    "NonFiniteError",
    "Parameter",
    "ShapeError",
    "Tensor",
    "abs_",
    "add",
    "as_tensor",
    "bilinear_sample",
    "broadcast_to",
    "clip",
    "concat",
    "conv2d",
    "div",
    "exp",
    "grad_enabled",
    "gradcheck",
    "interpolation_matrix",
    "layer_norm",
    "linear",
    "log",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "note_kinks",
    "power",
    "record_kinks",
    "relu",
    "reshape",
    "resize_bilinear",
    "sample_levels",
    "sigmoid",
    "softmax",
    "sqrt",
    "stack",
    "sub",
    "swapaxes",
    "tensor_sum",
    "transpose",
    "upsample2x",
]
