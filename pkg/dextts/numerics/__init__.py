"""Tensor substrate: autodiff Tensor, op set, parameter store, serialization."""
from dextts.numerics.gradcheck import grad_check, grad_check_params
from dextts.numerics.ops import (
    NORM_EPS,
    NormKind,
    broadcast_channels,
    concatenate,
    conv1d,
    conv2d,
    conv_transpose2d,
    crop,
    matmul,
    mse,
    normalize,
    pad_reflect,
    reflect_indices,
    softmax,
    stack,
    stop_gradient,
    straight_through,
    take,
)
from dextts.numerics.params import ParamStore, normal, xavier_uniform
from dextts.numerics.tensor import Tensor, as_tensor, exact_gradients, is_grad_enabled, no_grad

__all__ = [
    "NORM_EPS", "NormKind", "ParamStore", "Tensor", "as_tensor", "broadcast_channels", "concatenate",
    "conv1d", "conv2d", "conv_transpose2d", "crop", "exact_gradients", "grad_check", "grad_check_params",
    "is_grad_enabled", "matmul", "mse", "no_grad", "normal", "normalize", "pad_reflect", "reflect_indices",
    "softmax", "stack", "stop_gradient", "straight_through", "take", "xavier_uniform",
]
