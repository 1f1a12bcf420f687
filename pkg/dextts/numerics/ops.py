"""
Structured differentiable ops on Tensor.

The op set is fixed: matmul, conv1d/conv2d/conv_transpose2d, softmax,
normalize, gather (take), concatenate/stack, reflect padding, and the two
gradient-surrogate ops used by the duration predictor and the quantizer.
Anything else in the package is composed from these and the elementwise
methods on Tensor.
"""
import logging
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dextts.errors import ContractError, DimensionError
from dextts.numerics.tensor import Tensor, as_tensor, surrogate_gradients_enabled

logger = logging.getLogger(__name__)

NORM_EPS = 1e-5

Pair = Union[int, Tuple[int, int]]


class NormKind(str, Enum):
    """Reduction layouts for normalize()."""
    INSTANCE = "instance"
    LAYER = "layer"
    GROUP = "group"


def _pair(value: Pair) -> Tuple[int, int]:
    return (value, value) if isinstance(value, int) else (int(value[0]), int(value[1]))


# --------------------------------------------------------------------- matmul

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of the last two axes, batched over any leading axes.

    Raises:
        DimensionError: If inner extents differ or an input is not at least 2-D
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D inputs, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _sum_to(ga, x.shape), _sum_to(gb, y.shape)

    return Tensor.from_op(x @ y, (a, b), backward, "matmul")


def _sum_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, w: Tensor, stride: Pair = 1, pad: Pair = 0) -> Tensor:
    """
    2-D cross-correlation with zero padding.

    Args:
        x: Input, C_in×H×W
        w: Kernel, C_out×C_in×kh×kw
        stride: (stride_h, stride_w) or a single int
        pad: (pad_h, pad_w) or a single int

    Returns:
        C_out×H'×W' with H' = floor((H + 2·pad_h − kh)/stride_h) + 1

    Raises:
        DimensionError: If channels differ or the kernel exceeds the padded input
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise DimensionError(f"conv2d expects C×H×W input and 4-D kernel, got {x.shape}, {w.shape}")
    (sh, sw), (ph, pw) = _pair(stride), _pair(pad)
    c_in, h, wd = x.shape
    c_out, wc, kh, kw = w.shape
    if wc != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {c_in}, kernel {wc}")
    if kh < 1 or kw < 1 or sh < 1 or sw < 1:
        raise DimensionError(f"conv2d kernel and stride must be positive, got {(kh, kw)}, {(sh, sw)}")
    if h + 2 * ph < kh or wd + 2 * pw < kw:
        raise DimensionError(f"conv2d kernel {(kh, kw)} larger than padded input {(h + 2 * ph, wd + 2 * pw)}")

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    h_out, w_out = windows.shape[1], windows.shape[2]
    kernel = w.data
    out = np.tensordot(kernel, windows, axes=([1, 2, 3], [0, 3, 4]))

    def backward(g):
        gw = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
        cols = np.tensordot(kernel, g, axes=([0], [0]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + sh * (h_out - 1) + 1:sh, j:j + sw * (w_out - 1) + 1:sw] += cols[:, i, j]
        return gxp[:, ph:ph + h, pw:pw + wd], gw

    return Tensor.from_op(out, (x, w), backward, "conv2d")


def conv1d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """1-D cross-correlation over time: C_in×T with kernel C_out×C_in×k."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 3:
        raise DimensionError(f"conv1d expects C×T input and 3-D kernel, got {x.shape}, {w.shape}")
    c_in, t = x.shape
    c_out, wc, k = w.shape
    out = conv2d(x.reshape(c_in, 1, t), w.reshape(c_out, wc, 1, k), stride=(1, stride), pad=(0, pad))
    return out.reshape(c_out, out.shape[-1])


def conv_transpose2d(x: Tensor, w: Tensor, stride: Pair = 1, pad: Pair = 0, output_padding: Pair = 0) -> Tensor:
    """
    Transposed 2-D convolution (adjoint of conv2d).

    Args:
        x: Input, C_in×H×W
        w: Kernel, C_in×C_out×kh×kw
        stride, pad, output_padding: per-axis ints or a single int

    Returns:
        C_out×H'×W' with H' = (H−1)·stride − 2·pad + kh + output_padding
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise DimensionError(f"conv_transpose2d expects C×H×W input and 4-D kernel, got {x.shape}, {w.shape}")
    (sh, sw), (ph, pw), (oh, ow) = _pair(stride), _pair(pad), _pair(output_padding)
    c_in, h, wd = x.shape
    wc, c_out, kh, kw = w.shape
    if wc != c_in:
        raise DimensionError(f"conv_transpose2d channel mismatch: input {c_in}, kernel {wc}")
    h_out = (h - 1) * sh - 2 * ph + kh + oh
    w_out = (wd - 1) * sw - 2 * pw + kw + ow
    if h_out < 1 or w_out < 1:
        raise DimensionError(f"conv_transpose2d output would be empty: {(h_out, w_out)}")

    full_shape = (c_out, (h - 1) * sh + kh + oh, (wd - 1) * sw + kw + ow)
    kernel, inp = w.data, x.data
    full = np.zeros(full_shape)
    for i in range(kh):
        for j in range(kw):
            full[:, i:i + sh * (h - 1) + 1:sh, j:j + sw * (wd - 1) + 1:sw] += np.tensordot(
                kernel[:, :, i, j], inp, axes=([0], [0]))
    out = full[:, ph:ph + h_out, pw:pw + w_out]

    def backward(g):
        gfull = np.zeros(full_shape)
        gfull[:, ph:ph + h_out, pw:pw + w_out] = g
        gx = np.zeros_like(inp)
        gw = np.zeros_like(kernel)
        for i in range(kh):
            for j in range(kw):
                patch = gfull[:, i:i + sh * (h - 1) + 1:sh, j:j + sw * (wd - 1) + 1:sw]
                gx += np.tensordot(kernel[:, :, i, j], patch, axes=([1], [0]))
                gw[:, :, i, j] = np.tensordot(inp, patch, axes=([1, 2], [1, 2]))
        return gx, gw

    return Tensor.from_op(out.copy(), (x, w), backward, "conv_transpose2d")


# ------------------------------------------------------------ softmax & norms

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along `axis`."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward, "softmax")


def normalize(x: Tensor, kind: Union[NormKind, str] = NormKind.INSTANCE, eps: float = NORM_EPS,
              groups: Optional[int] = None) -> Tensor:
    """
    Zero-mean / unit-variance normalization without affine parameters.

    Layouts:
        instance: channel-first C×S..., statistics per channel over all spatial axes
        layer:    channel-last ...×C, statistics per position over the channel axis
        group:    channel-first C×S..., statistics per group of C/groups channels
                  jointly with all spatial axes

    Raises:
        DimensionError: If the reduction extent is empty or groups do not divide C
    """
    x = as_tensor(x)
    kind = NormKind(kind)
    data = x.data
    original_shape = data.shape
    if kind == NormKind.INSTANCE:
        if data.ndim < 2:
            raise DimensionError(f"instance norm needs C×S..., got {data.shape}")
        axes = tuple(range(1, data.ndim))
    elif kind == NormKind.LAYER:
        axes = (data.ndim - 1,)
    else:
        if groups is None or groups < 1 or data.shape[0] % groups:
            raise DimensionError(f"group norm: {groups} groups do not divide {data.shape[0]} channels")
        data = data.reshape((groups, data.shape[0] // groups) + data.shape[1:])
        axes = tuple(range(1, data.ndim))
    count = int(np.prod([data.shape[a] for a in axes]))
    if count < 1:
        raise DimensionError(f"normalize over an empty extent: {original_shape}")

    mean = data.mean(axis=axes, keepdims=True)
    centered = data - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def backward(g):
        g = g.reshape(xhat.shape)
        g_mean = g.mean(axis=axes, keepdims=True)
        gx_mean = (g * xhat).mean(axis=axes, keepdims=True)
        return ((inv_std * (g - g_mean - xhat * gx_mean)).reshape(original_shape),)

    return Tensor.from_op(xhat.reshape(original_shape), (x,), backward, f"{kind.value}_norm")


# -------------------------------------------------------------- gather/concat

def take(x: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather entries of `x` along `axis` (indices may repeat)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    if idx.ndim != 1:
        raise DimensionError("take() expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise DimensionError(f"take() index out of range for extent {x.shape[axis]}")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (full,)

    return Tensor.from_op(np.take(x.data, idx, axis=axis), (x,), backward, "take")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along an existing axis."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concatenate() of an empty list")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concatenate")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join equal-shape tensors along a new axis."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("stack() of an empty list")
    if axis < 0:
        axis += tensors[0].ndim + 1
    return concatenate([t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def reflect_indices(extent: int, before: int, after: int) -> np.ndarray:
    """Index map realising reflect padding of one axis (edge padding for extent 1)."""
    mode = "reflect" if extent > 1 else "edge"
    return np.pad(np.arange(extent), (before, after), mode=mode)


def pad_reflect(x: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Reflect-pad one axis of `x`."""
    if before == 0 and after == 0:
        return x
    x = as_tensor(x)
    return take(x, reflect_indices(x.shape[axis], before, after), axis=axis)


def crop(x: Tensor, axis: int, length: int) -> Tensor:
    """Keep the first `length` entries of an axis."""
    x = as_tensor(x)
    if length == x.shape[axis]:
        return x
    return take(x, np.arange(length), axis=axis)


# --------------------------------------------------------- gradient surrogates

def stop_gradient(x: Tensor) -> Tensor:
    """
    Forward identity whose gradient is zero.

    Under exact_gradients() the gradient passes through unchanged.
    """
    x = as_tensor(x)
    if surrogate_gradients_enabled():
        return Tensor(x.data)
    return Tensor.from_op(x.data.copy(), (x,), lambda g: (g,), "identity")


def straight_through(h: Tensor, quantized: np.ndarray) -> Tensor:
    """
    Return `quantized` exactly in the forward pass; route its gradient to `h`.

    Under exact_gradients() the output is a constant (true derivative zero).
    """
    h = as_tensor(h)
    q = np.array(quantized, dtype=np.float64)
    if q.shape != h.shape:
        raise DimensionError(f"straight_through shapes differ: {h.shape} vs {q.shape}")
    if not surrogate_gradients_enabled():
        return Tensor(q)
    return Tensor.from_op(q, (h,), lambda g: (g,), "straight_through")


def mse(a: Tensor, b: Union[Tensor, np.ndarray]) -> Tensor:
    """Mean squared error over all entries."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    return (diff * diff).mean()


def broadcast_channels(v: Tensor, spatial: Tuple[int, ...]) -> Tensor:
    """Tile a C vector into a C×S... tensor that is constant over space."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise ContractError(f"broadcast_channels expects a vector, got {v.shape}")
    ones = Tensor(np.ones((1,) + tuple(spatial)))
    return v.reshape((v.shape[0],) + (1,) * len(spatial)) * ones
