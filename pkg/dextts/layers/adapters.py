"""
Style adapters: attention-pooled AdaIN for time-invariant styles, AdaLN, and
the instance-normalized cross-attention adapter for time-variant styles.
"""
import logging
import math
from typing import Optional, Tuple

import numpy as np

from dextts.layers.common import Layer, Linear
from dextts.numerics import NORM_EPS, ParamStore, Tensor, concatenate, normalize, softmax, xavier_uniform

logger = logging.getLogger(__name__)


def attention_pool(rows: Tensor, w_ap: Tensor, return_weights: bool = False):
    """
    Softmax-weighted sum of rows: sum(softmax(rows·W_ap) × rows).

    Args:
        rows: (L+1)×C, the time row followed by one statistic row per layer
        w_ap: C×1 scoring weights

    Returns:
        Pooled C vector (and the L+1 weights when requested)
    """
    weights = softmax(rows @ w_ap, axis=0)
    pooled = (weights * rows).sum(axis=0)
    return (pooled, weights) if return_weights else pooled


def ada_in(h: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """IN(h)·sigma + mu with per-channel broadcast over the spatial axes of C×S..."""
    spatial = (1,) * (h.ndim - 1)
    c = h.shape[0]
    return normalize(h, "instance") * sigma.reshape((c,) + spatial) + mu.reshape((c,) + spatial)


def layer_statistics(h_inv: Tensor, eps: float = NORM_EPS) -> Tuple[Tensor, Tensor]:
    """Per-layer channel mean and std over time of an L×C×T stack."""
    means = h_inv.mean(axis=2)
    stds = (h_inv.var(axis=2) + eps).sqrt()
    return means, stds


class TIVAdapter(Layer):
    """Time-step-aware AdaIN driven by pooled multi-level statistics."""

    def __init__(self, store: ParamStore, name: str, channels: int, rng: np.random.Generator):
        super().__init__(store, name)
        self.channels = channels
        self.w_mu = self.param("w_ap_mu", xavier_uniform(rng, (channels, 1), channels, 1))
        self.w_sigma = self.param("w_ap_sigma", xavier_uniform(rng, (channels, 1), channels, 1))
        self.t_proj = Linear(store, self.child("t_proj"), channels, channels, rng)

    def pooled_stats(self, h_inv: Optional[Tensor], t_emb: Tensor,
                     stats: Optional[Tuple[Tensor, Tensor]] = None) -> Tuple[Tensor, Tensor]:
        """
        Pool (mu, sigma) over [t; layer stats].

        `stats` overrides the statistics computed from `h_inv`.
        """
        means, stds = stats if stats is not None else layer_statistics(h_inv)
        t_row = self.t_proj(t_emb).reshape(1, self.channels)
        mu = attention_pool(concatenate([t_row, means], axis=0), self.w_mu)
        sigma = attention_pool(concatenate([t_row, stds], axis=0), self.w_sigma).softplus()
        return mu, sigma

    def __call__(self, h_diff: Tensor, h_inv: Optional[Tensor], t_emb: Tensor,
                 stats: Optional[Tuple[Tensor, Tensor]] = None) -> Tensor:
        mu, sigma = self.pooled_stats(h_inv, t_emb, stats)
        return ada_in(h_diff, mu, sigma)


class AdaLN(Layer):
    """g(cond)·LN(h) + b(cond), LN over the last (channel) axis; plain LN without a condition."""

    def __init__(self, store: ParamStore, name: str, channels: int, cond_dim: Optional[int],
                 rng: np.random.Generator):
        super().__init__(store, name)
        self.channels = channels
        self.cond_dim = cond_dim
        if cond_dim is not None:
            self.scale = Linear(store, self.child("scale"), cond_dim, channels, rng, bias_value=1.0, gain=0.1)
            self.shift = Linear(store, self.child("shift"), cond_dim, channels, rng, gain=0.1)

    def __call__(self, h: Tensor, cond: Optional[Tensor]) -> Tensor:
        normed = normalize(h, "layer")
        if cond is None or self.cond_dim is None:
            return normed
        return normed * self.scale(cond) + self.shift(cond)


class TVAdapter(Layer):
    """
    Cross-attention from the normalized decoder stream to time-variant styles.

    Q = IN(h_diff)·W_q over the flattened F·T positions, K = h_d_v·W_k,
    V = h_d_v·W_v; logits are unscaled unless `scale` is set.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, style_dim: int, rng: np.random.Generator,
                 scale: bool = False, residual: bool = True):
        super().__init__(store, name)
        self.channels = channels
        self.scale = scale
        self.residual = residual
        self.q = Linear(store, self.child("q"), channels, channels, rng, bias=False)
        self.k = Linear(store, self.child("k"), style_dim, channels, rng, bias=False)
        self.v = Linear(store, self.child("v"), style_dim, channels, rng, bias=False)
        self.o = Linear(store, self.child("o"), channels, channels, rng)

    def __call__(self, h_diff: Tensor, h_d_v: Tensor, return_weights: bool = False):
        c, f, t = h_diff.shape
        queries = normalize(h_diff, "instance").reshape(c, f * t).transpose()
        logits = self.q(queries) @ self.k(h_d_v).transpose()
        if self.scale:
            logits = logits * (1.0 / math.sqrt(c))
        weights = softmax(logits, axis=1)
        attended = self.o(weights @ self.v(h_d_v)).transpose().reshape(c, f, t)
        out = h_diff + attended if self.residual else attended
        return (out, weights) if return_weights else out
