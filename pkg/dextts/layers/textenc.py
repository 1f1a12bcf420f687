"""
Transformer text encoder: phoneme ids to h_text.

Attention uses rotary positions on Q/K, a group-normalized head concat and a
swish output gate; every sub-layer is followed by AdaLN on the T-V style
vector (plain LN for the reference-free variant).
"""
import logging
import math
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from dextts.errors import ConfigError, InputError
from dextts.layers.adapters import AdaLN
from dextts.layers.common import Embedding, Layer, Linear
from dextts.models import PhonemeSeq, TextEncoderConfig
from dextts.numerics import ParamStore, Tensor, normalize, softmax, take

logger = logging.getLogger(__name__)


def rope_tables(length: int, dim: int, offset: int = 0, base: float = 10000.0):
    """cos/sin tables (length×dim) with each value repeated for its pair."""
    if dim % 2:
        raise ConfigError(f"Rotary embedding needs an even head dimension, got {dim}")
    theta = base ** (-2.0 * np.arange(dim // 2) / dim)
    angles = (np.arange(length) + offset)[:, None] * theta[None, :]
    return np.repeat(np.cos(angles), 2, axis=1), np.repeat(np.sin(angles), 2, axis=1)


def rope_apply(x: Tensor, offset: int = 0, base: float = 10000.0) -> Tensor:
    """
    Rotate consecutive value pairs of each position by n·theta_j.

    Args:
        x: ...×L×d, positions on the second-to-last axis
        offset: Shift added to every position
        base: Frequency base, theta_j = base^(−2j/d)

    Raises:
        ConfigError: If d is odd
    """
    length, dim = x.shape[-2], x.shape[-1]
    cos, sin = rope_tables(length, dim, offset, base)
    swap = np.arange(dim).reshape(-1, 2)[:, ::-1].reshape(-1)
    sign = np.tile([-1.0, 1.0], dim // 2)
    return x * Tensor(cos) + take(x, swap, axis=x.ndim - 1) * Tensor(sign * sin)


class SwishGatedAttention(Layer):
    """Multi-head self-attention with rotary Q/K, GN over heads, and a swish gate."""

    def __init__(self, store: ParamStore, name: str, cfg: TextEncoderConfig, rng: np.random.Generator):
        super().__init__(store, name)
        c = cfg.hidden
        self.heads, self.head_dim, self.rope_base = cfg.heads, cfg.head_dim, cfg.rope_base
        self.q = Linear(store, self.child("q"), c, c, rng, bias=False)
        self.k = Linear(store, self.child("k"), c, c, rng, bias=False)
        self.v = Linear(store, self.child("v"), c, c, rng, bias=False)
        self.gate = Linear(store, self.child("gate"), c, c, rng, bias=False)
        self.out = Linear(store, self.child("out"), c, c, rng, bias=False)

    def _split(self, x: Tensor) -> Tensor:
        length = x.shape[0]
        return x.reshape(length, self.heads, self.head_dim).transpose(1, 0, 2)

    def __call__(self, x: Tensor, return_weights: bool = False):
        length, c = x.shape
        q = rope_apply(self._split(self.q(x)), base=self.rope_base)
        k = rope_apply(self._split(self.k(x)), base=self.rope_base)
        v = self._split(self.v(x))
        weights = softmax((q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(self.head_dim)), axis=-1)
        heads = (weights @ v).transpose(1, 0, 2).reshape(length, c)
        y = normalize(heads.transpose(), "group", groups=self.heads).transpose()
        out = self.gate(x).silu() * self.out(y)
        return (out, weights) if return_weights else out


class FeedForward(Layer):
    """Two affine maps with GeLU between."""

    def __init__(self, store: ParamStore, name: str, channels: int, inner: int, rng: np.random.Generator):
        super().__init__(store, name)
        self.fc1 = Linear(store, self.child("fc1"), channels, inner, rng)
        self.fc2 = Linear(store, self.child("fc2"), inner, channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())


class EncoderLayer(Layer):
    """Y = AdaLN(MHSA(LN(X)) + X); X' = AdaLN(FFN(LN(Y)) + Y)."""

    def __init__(self, store: ParamStore, name: str, cfg: TextEncoderConfig, style_dim: Optional[int],
                 rng: np.random.Generator):
        super().__init__(store, name)
        self.attn = SwishGatedAttention(store, self.child("attn"), cfg, rng)
        self.ffn = FeedForward(store, self.child("ffn"), cfg.hidden, cfg.hidden * cfg.ffn_ratio, rng)
        self.norm1 = AdaLN(store, self.child("adaln1"), cfg.hidden, style_dim, rng)
        self.norm2 = AdaLN(store, self.child("adaln2"), cfg.hidden, style_dim, rng)

    def __call__(self, x: Tensor, style: Optional[Tensor]) -> Tensor:
        y = self.attn(normalize(x, "layer")) + x
        y = self.norm1(y, style)
        out = self.ffn(normalize(y, "layer")) + y
        return self.norm2(out, style)


class TextEncoder(Layer):
    """Embedding lookup followed by N encoder layers (no terminal LN)."""

    def __init__(self, store: ParamStore, name: str, cfg: TextEncoderConfig, style_dim: Optional[int],
                 rng: np.random.Generator):
        super().__init__(store, name)
        self.cfg = cfg
        self.style_dim = style_dim
        self.embedding = Embedding(store, self.child("embedding"), cfg.vocab, cfg.hidden, rng)
        self.layers: List[EncoderLayer] = [
            EncoderLayer(store, self.child(f"layers.{i}"), cfg, style_dim, rng) for i in range(cfg.layers)
        ]

    def __call__(self, phonemes: Union[PhonemeSeq, List[int]], style: Optional[Tensor] = None) -> Tensor:
        """
        Encode token ids.

        Raises:
            InputError: On ids outside the vocabulary
        """
        ids = phonemes.ids if isinstance(phonemes, PhonemeSeq) else list(phonemes)
        if not ids:
            raise InputError("Empty phoneme sequence")
        bad = [i for i in ids if not 0 <= i < self.cfg.vocab]
        if bad:
            raise InputError(f"Unknown token ids {bad} for vocabulary of {self.cfg.vocab}")
        x = take(self.embedding.table, ids, axis=0)
        cond = style if self.style_dim is not None else None
        for layer in self.layers:
            x = layer(x, cond)
        return x


def load_vocab(path: Union[str, Path]) -> List[str]:
    """Read a vocabulary file: one symbol per line, line index = token id."""
    symbols = Path(path).read_text(encoding="utf-8").splitlines()
    logger.info(f"Loaded {len(symbols)} symbols from {path}")
    return symbols


def save_vocab(path: Union[str, Path], symbols: List[str]) -> Path:
    path = Path(path)
    path.write_text("\n".join(symbols) + "\n", encoding="utf-8")
    return path
