"""
Parameter-holding building blocks shared by every model part.

A layer registers its weights in a ParamStore under `<name>.<key>` at
construction time and is a plain callable afterwards.
"""
import logging
import math

import numpy as np

from dextts.numerics import ParamStore, Tensor, conv1d, conv2d, conv_transpose2d, normal, take, xavier_uniform

logger = logging.getLogger(__name__)


class Layer:
    """Base for objects that own named parameters."""

    def __init__(self, store: ParamStore, name: str):
        self.store = store
        self.name = name

    def param(self, key: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        return self.store.create(f"{self.name}.{key}", value, trainable)

    def child(self, key: str) -> str:
        return f"{self.name}.{key}"


class Linear(Layer):
    """Affine map on the last axis: x·W + b."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, zero: bool = False, bias_value: float = 0.0, gain: float = 1.0):
        super().__init__(store, name)
        self.d_in, self.d_out = d_in, d_out
        weight = np.zeros((d_in, d_out)) if zero else xavier_uniform(rng, (d_in, d_out), d_in, d_out, gain)
        self.weight = self.param("weight", weight)
        self.bias = self.param("bias", np.full(d_out, bias_value)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        vector = x.ndim == 1
        if vector:
            x = x.reshape(1, x.shape[0])
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out.reshape(self.d_out) if vector else out


class Conv1d(Layer):
    """Same-padded 1-D convolution over time on C×T inputs (zero or circular padding)."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, kernel: int,
                 rng: np.random.Generator, zero: bool = False, circular: bool = False):
        super().__init__(store, name)
        fan_in, fan_out = c_in * kernel, c_out * kernel
        shape = (c_out, c_in, kernel)
        self.weight = self.param("weight", np.zeros(shape) if zero else xavier_uniform(rng, shape, fan_in, fan_out))
        self.bias = self.param("bias", np.zeros(c_out))
        self.pad = kernel // 2
        self.circular = circular

    def __call__(self, x: Tensor) -> Tensor:
        if self.circular and self.pad:
            frames = x.shape[1]
            x = take(x, np.arange(-self.pad, frames + self.pad) % frames, axis=1)
            return conv1d(x, self.weight) + self.bias.reshape(-1, 1)
        return conv1d(x, self.weight, pad=self.pad) + self.bias.reshape(-1, 1)


class Conv2d(Layer):
    """2-D convolution on C×H×W inputs."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, pad: int = 0, zero: bool = False):
        super().__init__(store, name)
        shape = (c_out, c_in, kernel, kernel)
        fan_in, fan_out = c_in * kernel * kernel, c_out * kernel * kernel
        self.weight = self.param("weight", np.zeros(shape) if zero else xavier_uniform(rng, shape, fan_in, fan_out))
        self.bias = self.param("bias", np.zeros(c_out))
        self.kernel, self.stride, self.pad = kernel, stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, stride=self.stride, pad=self.pad) + self.bias.reshape(-1, 1, 1)


class ConvTranspose2d(Layer):
    """Transposed 2-D convolution on C×H×W inputs."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, pad: int = 0, output_padding: int = 0):
        super().__init__(store, name)
        shape = (c_in, c_out, kernel, kernel)
        fan = c_in * kernel * kernel
        self.weight = self.param("weight", xavier_uniform(rng, shape, fan, c_out * kernel * kernel))
        self.bias = self.param("bias", np.zeros(c_out))
        self.kernel, self.stride, self.pad, self.output_padding = kernel, stride, pad, output_padding

    def __call__(self, x: Tensor) -> Tensor:
        out = conv_transpose2d(x, self.weight, stride=self.stride, pad=self.pad, output_padding=self.output_padding)
        return out + self.bias.reshape(-1, 1, 1)


class Embedding(Layer):
    """Lookup table of row vectors."""

    def __init__(self, store: ParamStore, name: str, count: int, dim: int, rng: np.random.Generator):
        super().__init__(store, name)
        self.count = count
        self.table = self.param("table", normal(rng, (count, dim), 1.0 / math.sqrt(dim)))


def sinusoidal_embedding(positions: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """
    Sinusoidal features [sin | cos] of (possibly fractional) positions.

    Returns:
        len(positions)×dim array; position 0 maps to sin = 0, cos = 1
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    args = positions[:, None] * freqs[None, :]
    out = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        out = np.concatenate([out, np.zeros((out.shape[0], 1))], axis=1)
    return out


class TimeEmbedding(Layer):
    """Noise-level embedding: sinusoidal features, Linear, SiLU, Linear."""

    def __init__(self, store: ParamStore, name: str, dim: int, rng: np.random.Generator, scale: float = 100.0):
        super().__init__(store, name)
        self.dim = dim
        self.scale = scale
        self.fc1 = Linear(store, self.child("fc1"), dim, dim, rng)
        self.fc2 = Linear(store, self.child("fc2"), dim, dim, rng)

    def __call__(self, c_noise: float) -> Tensor:
        features = Tensor(sinusoidal_embedding(np.array([c_noise * self.scale]), self.dim)[0])
        return self.fc2(self.fc1(features).silu())

