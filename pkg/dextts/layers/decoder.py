"""
Diffusion decoder.

F_θ runs input conv → stride-2 down conv → style adapters → patchify →
patch embedding → DiT blocks → un-patchify → up conv → output conv (with a
skip from the input features). D_θ wraps F_θ with EDM preconditioning; the
schedule is σ_t = t.
"""
import logging
import math
from pathlib import Path
from typing import List, NamedTuple, Optional, Union

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from dextts.errors import ConfigError, ContractError, DimensionError, ExtentError
from dextts.layers.adapters import TIVAdapter, TVAdapter
from dextts.layers.common import Conv2d, ConvTranspose2d, Layer, Linear, TimeEmbedding, sinusoidal_embedding
from dextts.layers.styles import StyleBundle
from dextts.models import EmbeddingKind, ModelConfig, NoiseSchedule
from dextts.numerics import (
    ParamStore,
    Tensor,
    broadcast_channels,
    concatenate,
    crop,
    mse,
    no_grad,
    normal,
    normalize,
    pad_reflect,
    softmax,
    stack,
)
from dextts.utils import write_csv

logger = logging.getLogger(__name__)

# Resolution factor of the single down/up stage around the bottleneck.
DOWN_FACTOR = 2


# ------------------------------------------------------------ EDM helpers

class EdmCoefficients(NamedTuple):
    c_skip: float
    c_out: float
    c_in: float
    c_noise: float


def edm_coefficients(t: float, sigma_data: float) -> EdmCoefficients:
    """
    Preconditioning coefficients for noise level t (σ_t = t).

    At t = 0 c_noise is −inf; D_θ never evaluates F_θ there.

    Raises:
        ContractError: If t < 0
    """
    if t < 0:
        raise ContractError(f"Noise level must be >= 0, got {t}")
    denom = t * t + sigma_data * sigma_data
    return EdmCoefficients(
        c_skip=sigma_data * sigma_data / denom,
        c_out=t * sigma_data / math.sqrt(denom),
        c_in=1.0 / math.sqrt(denom),
        c_noise=0.25 * math.log(t) if t > 0 else -math.inf,
    )


def loss_weight(t: float, sigma_data: float) -> float:
    """λ(t) = (t² + σ_d²) / (t·σ_d)²."""
    return (t * t + sigma_data * sigma_data) / (t * sigma_data) ** 2


def sampling_steps(schedule: NoiseSchedule, nfe: int) -> np.ndarray:
    """
    nfe noise levels from σ_max downward followed by a final 0.

    t_i = (σ_max^(1/ρ) + i/nfe · (σ_min^(1/ρ) − σ_max^(1/ρ)))^ρ for i < nfe.

    Raises:
        ContractError: If nfe < 1
    """
    if nfe < 1:
        raise ContractError(f"nfe must be >= 1, got {nfe}")
    inv_rho = 1.0 / schedule.rho
    hi, lo = schedule.sigma_max ** inv_rho, schedule.sigma_min ** inv_rho
    steps = (hi + np.arange(nfe) / nfe * (lo - hi)) ** schedule.rho
    return np.append(steps, 0.0)


# ------------------------------------------------------------ patch grid

class PatchGrid(BaseModel):
    """Reflect-padding plan making F and T divisible by factor·P."""

    patch_size: int = Field(..., ge=1)
    factor: int = Field(1, ge=1, description="Down-sampling applied before patchify")
    freq: int = Field(..., ge=1)
    time: int = Field(..., ge=1)
    freq_pad: int = Field(0, ge=0)
    time_pad: int = Field(0, ge=0)

    @property
    def padded_freq(self) -> int:
        return self.freq + self.freq_pad

    @property
    def padded_time(self) -> int:
        return self.time + self.time_pad

    @property
    def freq_patches(self) -> int:
        return self.padded_freq // (self.factor * self.patch_size)

    @property
    def time_patches(self) -> int:
        return self.padded_time // (self.factor * self.patch_size)


def patch_grid(freq: int, time: int, patch_size: int, factor: int = 1) -> PatchGrid:
    multiple = patch_size * factor
    return PatchGrid(
        patch_size=patch_size,
        factor=factor,
        freq=freq,
        time=time,
        freq_pad=-freq % multiple,
        time_pad=-time % multiple,
    )


def freq_patches(n_mels: int, patch_size: int) -> int:
    """Frequency extent F₂ of the decoder bottleneck for a mel of n_mels bins."""
    return patch_grid(n_mels, 1, patch_size, DOWN_FACTOR).freq_patches


class Patchify(Layer):
    """Strided conv into patches: kernel 2P−1 with padding P−1 when overlapping, else kernel P."""

    def __init__(self, store: ParamStore, name: str, channels: int, patch_size: int, overlap: bool,
                 rng: np.random.Generator):
        super().__init__(store, name)
        self.patch_size = patch_size
        self.kernel = 2 * patch_size - 1 if overlap else patch_size
        self.stride = patch_size
        self.pad = patch_size - 1 if overlap else 0
        self.conv = Conv2d(store, self.child("conv"), channels, channels, self.kernel, rng,
                           stride=self.stride, pad=self.pad)

    def __call__(self, h: Tensor) -> Tensor:
        """
        Raises:
            DimensionError: If F or T is not a multiple of P
        """
        _, f, t = h.shape
        if f % self.patch_size or t % self.patch_size:
            raise DimensionError(f"Patchify input {f}×{t} is not divisible by P={self.patch_size}")
        return self.conv(h)


class Unpatchify(Layer):
    """Transposed conv mirroring Patchify; C×F₂×T₂ back to C×(F₂·P)×(T₂·P)."""

    def __init__(self, store: ParamStore, name: str, channels: int, patch_size: int, overlap: bool,
                 rng: np.random.Generator):
        super().__init__(store, name)
        kernel = 2 * patch_size - 1 if overlap else patch_size
        pad = patch_size - 1 if overlap else 0
        self.conv = ConvTranspose2d(store, self.child("conv"), channels, channels, kernel, rng,
                                    stride=patch_size, pad=pad, output_padding=pad)

    def __call__(self, h: Tensor) -> Tensor:
        return self.conv(h)


# ------------------------------------------------------ patch embeddings

class ConvFreqEmbedding(Layer):
    """
    h_p + PE_T + PE_F.

    PE_T is the frequency-axis mean of a conv over h_p (C×1×T₂), so it exists
    for any T₂; PE_F is a learned C×F₂×1 table.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, freq_extent: int, rng: np.random.Generator):
        super().__init__(store, name)
        self.freq_extent = freq_extent
        self.conv = Conv2d(store, self.child("conv"), channels, channels, 3, rng, pad=1)
        self.pe_f = self.param("pe_f", normal(rng, (channels, freq_extent, 1), 0.02))

    def time_encoding(self, h_p: Tensor) -> Tensor:
        return self.conv(h_p).mean(axis=1, keepdims=True)

    def __call__(self, h_p: Tensor) -> Tensor:
        if h_p.shape[1] != self.freq_extent:
            raise ConfigError(f"Frequency extent {h_p.shape[1]} differs from the configured {self.freq_extent}")
        return h_p + self.time_encoding(h_p) + self.pe_f


def sincos_grid(channels: int, freq: int, time: int) -> np.ndarray:
    """Fixed C×F×T grid: first half of the channels encodes frequency, second half time."""
    half = channels // 2
    f_part = sinusoidal_embedding(np.arange(freq), half).T[:, :, None]
    t_part = sinusoidal_embedding(np.arange(time), channels - half).T[:, None, :]
    return np.concatenate([np.broadcast_to(f_part, (half, freq, time)),
                           np.broadcast_to(t_part, (channels - half, freq, time))], axis=0)


class SinCosEmbedding(Layer):
    """Fixed sinusoidal grid on both axes (no parameters)."""

    def __init__(self, store: ParamStore, name: str, channels: int):
        super().__init__(store, name)
        self.channels = channels

    def __call__(self, h_p: Tensor) -> Tensor:
        _, f, t = h_p.shape
        return h_p + Tensor(sincos_grid(self.channels, f, t))


class TimeFreqEmbedding(Layer):
    """Learned tables on both axes; the time table has a fixed trained extent."""

    def __init__(self, store: ParamStore, name: str, channels: int, freq_extent: int, max_time: int,
                 rng: np.random.Generator):
        super().__init__(store, name)
        self.freq_extent, self.max_time = freq_extent, max_time
        self.pe_t = self.param("pe_t", normal(rng, (channels, 1, max_time), 0.02))
        self.pe_f = self.param("pe_f", normal(rng, (channels, freq_extent, 1), 0.02))

    def __call__(self, h_p: Tensor) -> Tensor:
        """
        Raises:
            ExtentError: If T₂ exceeds the trained time extent
        """
        _, f, t = h_p.shape
        if t > self.max_time:
            raise ExtentError(f"Time extent {t} exceeds the trained {self.max_time} patches")
        if f != self.freq_extent:
            raise ConfigError(f"Frequency extent {f} differs from the configured {self.freq_extent}")
        return h_p + crop(self.pe_t, 2, t) + self.pe_f


class PosFreqEmbedding(Layer):
    """Sinusoidal time encoding plus a learned frequency table."""

    def __init__(self, store: ParamStore, name: str, channels: int, freq_extent: int, rng: np.random.Generator):
        super().__init__(store, name)
        self.channels, self.freq_extent = channels, freq_extent
        self.pe_f = self.param("pe_f", normal(rng, (channels, freq_extent, 1), 0.02))

    def __call__(self, h_p: Tensor) -> Tensor:
        _, f, t = h_p.shape
        if f != self.freq_extent:
            raise ConfigError(f"Frequency extent {f} differs from the configured {self.freq_extent}")
        pe_t = sinusoidal_embedding(np.arange(t), self.channels).T[:, None, :]
        return h_p + Tensor(pe_t) + self.pe_f


def build_patch_embedding(kind: Union[EmbeddingKind, str], store: ParamStore, name: str, channels: int,
                          freq_extent: int, max_time: int, rng: np.random.Generator) -> Layer:
    kind = EmbeddingKind(kind)
    if kind == EmbeddingKind.SIN_COS:
        return SinCosEmbedding(store, name, channels)
    if kind == EmbeddingKind.TIME_FREQ:
        return TimeFreqEmbedding(store, name, channels, freq_extent, max_time, rng)
    if kind == EmbeddingKind.POS_FREQ:
        return PosFreqEmbedding(store, name, channels, freq_extent, rng)
    return ConvFreqEmbedding(store, name, channels, freq_extent, rng)


# ------------------------------------------------------------------ DiT

class DiTBlock(Layer):
    """
    Pre-LN attention and MLP, each LN modulated by the time embedding.

    The modulation projection starts at zero, so the gates are zero and the
    block is the identity at initialization.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, heads: int, mlp_ratio: int,
                 rng: np.random.Generator):
        super().__init__(store, name)
        self.channels, self.heads = channels, heads
        self.head_dim = channels // heads
        self.modulation = Linear(store, self.child("modulation"), channels, 6 * channels, rng, zero=True)
        self.qkv = Linear(store, self.child("qkv"), channels, 3 * channels, rng)
        self.proj = Linear(store, self.child("proj"), channels, channels, rng)
        self.fc1 = Linear(store, self.child("fc1"), channels, mlp_ratio * channels, rng)
        self.fc2 = Linear(store, self.child("fc2"), mlp_ratio * channels, channels, rng)

    def attention(self, h: Tensor, return_weights: bool = False):
        n, c = h.shape
        qkv = self.qkv(h).reshape(n, 3, self.heads, self.head_dim).transpose(1, 2, 0, 3)
        q, k, v = qkv[0], qkv[1], qkv[2]
        weights = softmax((q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(self.head_dim)), axis=-1)
        out = self.proj((weights @ v).transpose(1, 0, 2).reshape(n, c))
        return (out, weights) if return_weights else out

    def __call__(self, seq: Tensor, t_emb: Tensor) -> Tensor:
        c = self.channels
        mod = self.modulation(t_emb.silu())
        shift1, scale1, gate1 = mod[0:c], mod[c:2 * c], mod[2 * c:3 * c]
        shift2, scale2, gate2 = mod[3 * c:4 * c], mod[4 * c:5 * c], mod[5 * c:]
        h = normalize(seq, "layer") * (scale1 + 1.0) + shift1
        seq = seq + gate1 * self.attention(h)
        h = normalize(seq, "layer") * (scale2 + 1.0) + shift2
        return seq + gate2 * self.fc2(self.fc1(h).gelu())


# -------------------------------------------------------------- decoder

class Decoder(Layer):
    """The raw network F_θ(x_t, h_mel, c_noise, styles)."""

    def __init__(self, store: ParamStore, name: str, config: ModelConfig, rng: np.random.Generator):
        super().__init__(store, name)
        c, p = config.hidden, config.patch_size
        self.config = config
        self.time = TimeEmbedding(store, self.child("time"), c, rng)
        self.inp = Conv2d(store, self.child("inp"), c + 2, c, 3, rng, pad=1)
        self.down = Conv2d(store, self.child("down"), c, c, 3, rng, stride=DOWN_FACTOR, pad=1)

        self.tiv = None
        self.tv = None
        if not config.reference_free:
            if config.use_tiv:
                self.tiv = TIVAdapter(store, self.child("tiv"), c, rng)
            if config.use_tv:
                self.tv = TVAdapter(store, self.child("tv"), c, config.codebook_dim, rng,
                                    scale=config.tv_attention_scale, residual=config.tv_residual)

        self.patchify = Patchify(store, self.child("patchify"), c, p, config.overlap, rng)
        self.embed = build_patch_embedding(config.embedding, store, self.child("embed"), c,
                                           freq_patches(config.n_mels, p), config.max_time_patches, rng)
        self.blocks: List[DiTBlock] = [
            DiTBlock(store, self.child(f"dit.{i}"), c, config.dit_heads, config.mlp_ratio, rng)
            for i in range(config.dit_blocks)
        ]
        self.unpatchify = Unpatchify(store, self.child("unpatchify"), c, p, config.overlap, rng)
        self.up = ConvTranspose2d(store, self.child("up"), c, c, 3, rng, stride=DOWN_FACTOR, pad=1, output_padding=1)
        self.out = Conv2d(store, self.child("out"), 2 * c, 1, 3, rng, pad=1)

    def adapt(self, h: Tensor, t_emb: Tensor, styles: Optional[StyleBundle]) -> Tensor:
        """Bottleneck style injection: T-IV adapter then T-V adapter."""
        if styles is None:
            return h
        if self.tiv is not None and styles.h_inv is not None:
            h = self.tiv(h, styles.h_inv, t_emb, stats=styles.inv_stats())
        if self.tv is not None and styles.h_d_v is not None:
            h = self.tv(h, styles.h_d_v)
        return h

    def __call__(self, x_t: Tensor, h_mel: Tensor, c_noise: float, styles: Optional[StyleBundle] = None) -> Tensor:
        """
        Raises:
            DimensionError: If x_t and h_mel shapes differ
            NumericError: If any intermediate value is non-finite
        """
        if x_t.shape != h_mel.shape:
            raise DimensionError(f"x_t {x_t.shape} and h_mel {h_mel.shape} differ")
        f, t = x_t.shape
        grid = patch_grid(f, t, self.config.patch_size, DOWN_FACTOR)
        t_emb = self.time(c_noise)

        h = stack([x_t, h_mel])
        h = pad_reflect(pad_reflect(h, 1, 0, grid.freq_pad), 2, 0, grid.time_pad)
        h = concatenate([h, broadcast_channels(t_emb, (grid.padded_freq, grid.padded_time))], axis=0)
        skip = self.inp(h).silu()
        h = self.down(skip).silu()
        h = self.adapt(h, t_emb, styles)

        h = self.embed(self.patchify(h))
        c, f2, t2 = h.shape
        seq = h.reshape(c, f2 * t2).transpose()
        for block in self.blocks:
            seq = block(seq, t_emb)
        h = self.unpatchify(seq.transpose().reshape(c, f2, t2))

        h = self.up(h).silu()
        out = self.out(concatenate([h, skip], axis=0))
        out = out.reshape(grid.padded_freq, grid.padded_time)
        return crop(crop(out, 0, f), 1, t)


def denoise(decoder: Decoder, x_t: Tensor, h_mel: Tensor, t: float, schedule: NoiseSchedule,
            styles: Optional[StyleBundle] = None) -> Tensor:
    """
    D_θ = c_skip·x_t + c_out·F_θ(c_in·x_t, c_noise); D_θ(x, 0) is x itself.

    Raises:
        ContractError: If t < 0
    """
    coef = edm_coefficients(t, schedule.sigma_data)
    if t == 0:
        return x_t
    raw = decoder(x_t * coef.c_in, h_mel, coef.c_noise, styles)
    return x_t * coef.c_skip + raw * coef.c_out


def diffusion_loss(decoder: Decoder, x: np.ndarray, h_mel: Tensor, schedule: NoiseSchedule,
                   rng: np.random.Generator, styles: Optional[StyleBundle] = None,
                   t: Optional[float] = None, noise: Optional[np.ndarray] = None) -> Tensor:
    """
    λ(t)·MSE(D_θ(x + t·ε, t), x) with ln t ~ N(P_mean, P_std²), ε ~ N(0, I).

    `t` and `noise` are drawn from `rng` (in that order) unless given.
    """
    x = np.asarray(x, dtype=np.float64)
    if t is None:
        t = float(np.exp(rng.normal(schedule.p_mean, schedule.p_std)))
    if noise is None:
        noise = rng.standard_normal(x.shape)
    x_t = Tensor(x + t * noise)
    return mse(denoise(decoder, x_t, h_mel, t, schedule, styles), x) * loss_weight(t, schedule.sigma_data)


def sample_euler(decoder: Decoder, h_mel: Tensor, schedule: NoiseSchedule, nfe: int, rng: np.random.Generator,
                 styles: Optional[StyleBundle] = None, prior_mean: bool = False,
                 trace_path: Optional[Union[str, Path]] = None, progress: bool = False) -> np.ndarray:
    """
    Euler integration of the probability-flow ODE in denoiser form.

    x ← x + (t_next − t)·(x − D_θ(x, t))/t, with the last step (t_next = 0)
    taken as x ← D_θ(x, t). Starts from σ_max·ε (plus h_mel when `prior_mean`).

    Returns:
        The sampled F×T mel values

    Raises:
        ContractError: If nfe < 1
    """
    steps = sampling_steps(schedule, nfe)
    x = schedule.sigma_max * rng.standard_normal(h_mel.shape)
    if prior_mean:
        x = x + h_mel.data
    trace = []
    with no_grad():
        for i in tqdm(range(nfe), desc="sampling", disable=not progress, leave=False):
            t, t_next = float(steps[i]), float(steps[i + 1])
            d = denoise(decoder, Tensor(x), h_mel, t, schedule, styles).data
            trace.append((i, t, float(np.linalg.norm(x)), float(np.linalg.norm(d - x))))
            x = d if t_next == 0 else x + (t_next - t) * (x - d) / t
    if trace_path is not None:
        write_csv(trace_path, ["i", "t", "x_norm", "update_norm"], trace)
    logger.debug(f"Sampled {h_mel.shape} in {nfe} steps")
    return x
