"""
Reference style encoders.

The T-IV encoder keeps every instance-normalized block output (multi-level
maps) together with the channel statistics that normalization removed. The
T-V encoder is layer-normalized and splits into a time-pooled vector for the
text encoder and a vector-quantized, pitch-enriched sequence for the decoder.
"""
import logging
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from dextts.errors import DimensionError, InputError
from dextts.layers.common import Conv1d, Layer, Linear
from dextts.models import MelSpec, ModelConfig
from dextts.numerics import NORM_EPS, ParamStore, Tensor, mse, normal, normalize, stack, straight_through

logger = logging.getLogger(__name__)

EMA_EPS = 1e-5


def _mel_values(ref: Union[MelSpec, np.ndarray, Tensor]) -> np.ndarray:
    if isinstance(ref, MelSpec):
        return ref.values
    values = ref.data if isinstance(ref, Tensor) else np.asarray(ref, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] < 1:
        raise InputError(f"Reference mel must be F×T with T >= 1, got shape {values.shape}")
    return values


# ------------------------------------------------------------------ VQ

class Codebook(Layer):
    """
    K×D code rows learned by exponential moving averages (not by gradients).

    Buffers: `embedding`, `cluster_size` and `embed_sum` (EMA accumulators)
    and `usage` (assignment counts since construction).
    """

    def __init__(self, store: ParamStore, name: str, size: int, dim: int, rng: np.random.Generator,
                 decay: float = 0.99):
        super().__init__(store, name)
        self.size, self.dim, self.decay = size, dim, decay
        init = normal(rng, (size, dim), 1.0)
        self.embedding = self.param("embedding", init, trainable=False)
        self.cluster_size = self.param("cluster_size", np.ones(size), trainable=False)
        self.embed_sum = self.param("embed_sum", init.copy(), trainable=False)
        self.usage = self.param("usage", np.zeros(size), trainable=False)

    def nearest(self, h: np.ndarray) -> np.ndarray:
        """Index of the closest row (Euclidean) for every input row; ties go to the lower index."""
        e = self.embedding.data
        dist = (h * h).sum(axis=1, keepdims=True) - 2.0 * h @ e.T + (e * e).sum(axis=1)[None, :]
        return np.argmin(dist, axis=1)

    def ema_update(self, h: np.ndarray, idx: np.ndarray) -> None:
        """Move assigned rows toward the mean of their inputs (Laplace-smoothed counts)."""
        counts = np.bincount(idx, minlength=self.size).astype(np.float64)
        sums = np.zeros((self.size, self.dim))
        np.add.at(sums, idx, h)
        cluster_size = self.decay * self.cluster_size.data + (1.0 - self.decay) * counts
        embed_sum = self.decay * self.embed_sum.data + (1.0 - self.decay) * sums
        total = cluster_size.sum()
        smoothed = (cluster_size + EMA_EPS) / (total + self.size * EMA_EPS) * total
        self.store.set_value(self.child("cluster_size"), cluster_size)
        self.store.set_value(self.child("embed_sum"), embed_sum)
        self.store.set_value(self.child("embedding"), embed_sum / smoothed[:, None])
        self.store.set_value(self.child("usage"), self.usage.data + counts)

    def perplexity(self) -> float:
        """exp(entropy) of the usage distribution; 0 when nothing was assigned yet."""
        counts = self.usage.data
        if counts.sum() == 0:
            return 0.0
        p = counts[counts > 0] / counts.sum()
        return float(np.exp(-(p * np.log(p)).sum()))

    def used_codes(self) -> int:
        return int((self.usage.data > 0).sum())


def vq_quantize(h: Tensor, codebook: Codebook, update: bool = False) -> Tuple[Tensor, List[int], Tensor]:
    """
    Snap each row of a T×D matrix to its nearest codebook row.

    The forward value is the exact codebook row; the gradient passes straight
    through to `h`. L_vq = mean((h − sg(e_idx))²).

    Args:
        h: T×D encoder outputs
        codebook: Codebook with matching D
        update: Apply the EMA codebook update after assignment

    Returns:
        (h_q, indices, L_vq)

    Raises:
        DimensionError: If D differs from the codebook dimension
    """
    if h.ndim != 2 or h.shape[1] != codebook.dim:
        raise DimensionError(f"Expected T×{codebook.dim} input, got {h.shape}")
    idx = codebook.nearest(h.data)
    rows = codebook.embedding.data[idx].copy()
    h_q = straight_through(h, rows)
    loss = mse(h, rows)
    if update:
        codebook.ema_update(h.data, idx)
    return h_q, idx.tolist(), loss


# -------------------------------------------------------------- encoders

class ResidualConvBlock(Layer):
    """x + conv(relu(conv(x))) over time on C×T."""

    def __init__(self, store: ParamStore, name: str, channels: int, rng: np.random.Generator,
                 circular: bool = False):
        super().__init__(store, name)
        self.conv_a = Conv1d(store, self.child("conv_a"), channels, channels, 3, rng, circular=circular)
        self.conv_b = Conv1d(store, self.child("conv_b"), channels, channels, 3, rng, circular=circular)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv_b(self.conv_a(x).relu())


class TIVEncoder(Layer):
    """
    L residual conv blocks, each followed by instance normalization.

    Convolutions wrap the time axis, so per-layer statistics do not depend on
    where a periodic reference starts.
    """

    def __init__(self, store: ParamStore, name: str, n_mels: int, channels: int, layers: int,
                 rng: np.random.Generator):
        super().__init__(store, name)
        self.inp = Conv1d(store, self.child("inp"), n_mels, channels, 3, rng, circular=True)
        self.blocks = [ResidualConvBlock(store, self.child(f"blocks.{i}"), channels, rng, circular=True)
                       for i in range(layers)]

    def __call__(self, ref: Union[MelSpec, np.ndarray]) -> Tuple[Tensor, Tensor, Tensor]:
        """
        Encode a reference mel.

        Returns:
            (h_inv L×C×T of post-IN maps, L×C pre-IN channel means, L×C pre-IN channel stds)

        Raises:
            InputError: If the reference has no frames
        """
        x = self.inp(Tensor(_mel_values(ref)))
        maps, means, stds = [], [], []
        for block in self.blocks:
            y = block(x)
            means.append(y.mean(axis=1))
            stds.append((y.var(axis=1) + NORM_EPS).sqrt())
            x = normalize(y, "instance")
            maps.append(x)
        return stack(maps), stack(means), stack(stds)


class PitchGRU(Layer):
    """
    Single-layer GRU over a log-F0 track, hidden size C, h_0 = 0.

    r = σ(x W_ir + b_ir + h W_hr + b_hr), z likewise,
    n = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn)), h' = (1 − z) ⊙ n + z ⊙ h.
    Gate blocks are laid out [r | z | n] along the last axis.
    """

    def __init__(self, store: ParamStore, name: str, hidden: int, rng: np.random.Generator):
        super().__init__(store, name)
        self.hidden = hidden
        bound = 1.0 / np.sqrt(hidden)
        self.w_ih = self.param("w_ih", rng.uniform(-bound, bound, size=(1, 3 * hidden)))
        self.w_hh = self.param("w_hh", rng.uniform(-bound, bound, size=(hidden, 3 * hidden)))
        self.b_ih = self.param("b_ih", rng.uniform(-bound, bound, size=3 * hidden))
        self.b_hh = self.param("b_hh", rng.uniform(-bound, bound, size=3 * hidden))

    def __call__(self, log_f0: Union[np.ndarray, Tensor]) -> Tensor:
        """T log-F0 values to the T×C hidden sequence."""
        track = log_f0 if isinstance(log_f0, Tensor) else Tensor(np.asarray(log_f0, dtype=np.float64))
        c = self.hidden
        gi = track.reshape(track.shape[0], 1) @ self.w_ih + self.b_ih
        h = Tensor(np.zeros((1, c)))
        outputs = []
        for t in range(track.shape[0]):
            gh = h @ self.w_hh + self.b_hh
            gx = gi[t:t + 1]
            r = (gx[:, :c] + gh[:, :c]).sigmoid()
            z = (gx[:, c:2 * c] + gh[:, c:2 * c]).sigmoid()
            n = (gx[:, 2 * c:] + r * gh[:, 2 * c:]).tanh()
            h = (1.0 - z) * n + z * h
            outputs.append(h)
        return stack(outputs).reshape(track.shape[0], c)


class TVEncoder(Layer):
    """Layer-normalized residual conv stack with a pooled branch and a quantized branch."""

    def __init__(self, store: ParamStore, name: str, config: ModelConfig, rng: np.random.Generator):
        super().__init__(store, name)
        c, d = config.hidden, config.codebook_dim
        self.use_pitch = config.use_pitch
        self.inp = Conv1d(store, self.child("inp"), config.n_mels, c, 3, rng)
        self.blocks = [
            ResidualConvBlock(store, self.child(f"blocks.{i}"), c, rng) for i in range(config.style_layers)
        ]
        self.pre_vq = Linear(store, self.child("pre_vq"), c, d, rng)
        self.codebook = Codebook(store, self.child("codebook"), config.codebook_size, d, rng, config.ema_decay)
        if self.use_pitch:
            self.pitch = PitchGRU(store, self.child("pitch"), c, rng)
            self.pitch_proj = Linear(store, self.child("pitch_proj"), c, d, rng)

    def __call__(self, ref: Union[MelSpec, np.ndarray], log_f0: Optional[np.ndarray] = None,
                 update_codebook: bool = False):
        """
        Returns:
            (h_e_v C vector, h_q T×D, h_d_v T×D, h_f0 T×C or None, code indices, L_vq)
        """
        values = _mel_values(ref)
        frames = values.shape[1]
        x = self.inp(Tensor(values))
        for block in self.blocks:
            x = normalize(block(x).transpose(), "layer").transpose()
        frames_first = x.transpose()

        h_f0 = None
        if self.use_pitch:
            track = np.zeros(frames) if log_f0 is None else np.asarray(log_f0, dtype=np.float64).reshape(-1)
            if track.shape[0] != frames:
                raise DimensionError(f"F0 track has {track.shape[0]} frames, reference has {frames}")
            h_f0 = self.pitch(track)

        pooled_in = frames_first + h_f0 if h_f0 is not None else frames_first
        h_e_v = pooled_in.mean(axis=0)

        h_q, codes, vq_loss = vq_quantize(self.pre_vq(frames_first), self.codebook, update=update_codebook)
        h_d_v = h_q + self.pitch_proj(h_f0) if h_f0 is not None else h_q
        return h_e_v, h_q, h_d_v, h_f0, codes, vq_loss


class StyleBundle(BaseModel):
    """
    Styles of one reference.

    `h_q` holds the exact codebook rows; `h_d_v` is `h_q` plus the projected
    pitch embedding (equal to `h_q` when pitch is disabled). Fields of a
    disabled path are None.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    h_inv: Optional[Tensor] = None
    inv_means: Optional[Tensor] = None
    inv_stds: Optional[Tensor] = None
    h_e_v: Optional[Tensor] = None
    h_q: Optional[Tensor] = None
    h_d_v: Optional[Tensor] = None
    h_f0: Optional[Tensor] = None
    codes: List[int] = []
    vq_loss: Optional[Tensor] = None

    def inv_stats(self) -> Optional[Tuple[Tensor, Tensor]]:
        if self.inv_means is None:
            return None
        return self.inv_means, self.inv_stds


class StyleEncoder(Layer):
    """T-IV and T-V encoders of the reference-conditioned model."""

    def __init__(self, store: ParamStore, name: str, config: ModelConfig, rng: np.random.Generator):
        super().__init__(store, name)
        self.tiv = None
        self.tv = None
        if config.use_tiv:
            self.tiv = TIVEncoder(store, self.child("tiv"), config.n_mels, config.hidden, config.style_layers, rng)
        if config.use_tv:
            self.tv = TVEncoder(store, self.child("tv"), config, rng)

    def __call__(self, ref: Union[MelSpec, np.ndarray], log_f0: Optional[np.ndarray] = None,
                 update_codebook: bool = False) -> StyleBundle:
        bundle = StyleBundle()
        if self.tiv is not None:
            bundle.h_inv, bundle.inv_means, bundle.inv_stds = self.tiv(ref)
        if self.tv is not None:
            (bundle.h_e_v, bundle.h_q, bundle.h_d_v, bundle.h_f0,
             bundle.codes, bundle.vq_loss) = self.tv(ref, log_f0, update_codebook)
        return bundle
