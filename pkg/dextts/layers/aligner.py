"""
Aligner: duration predictor, monotonic alignment search and length regulation.

Text states are projected to mel space per token, then expanded to frames,
giving h_mel (the prior target and the decoder's conditioning stream).
"""
import logging
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from dextts.errors import ContractError, DimensionError, InfeasibleAlignmentError, NumericError
from dextts.layers.common import Conv1d, Layer, Linear
from dextts.models import AlignmentPath, MelSpec, ModelConfig
from dextts.numerics import ParamStore, Tensor, mse, normalize, stop_gradient, take
from dextts.utils import write_csv

logger = logging.getLogger(__name__)

# Upper bound on one token's predicted frame count.
MAX_TOKEN_FRAMES = 4096


# ------------------------------------------------------------------ MAS

def mas_likelihoods(mu: Union[Tensor, np.ndarray], x: Union[MelSpec, np.ndarray]) -> np.ndarray:
    """
    Unit-variance Gaussian log-likelihoods (up to a constant).

    Args:
        mu: L_p×F per-token mel-space means
        x: F×T target mel

    Returns:
        L_p×T matrix, ll[i, j] = −||mu_i − x[:, j]||² / 2
    """
    mu = mu.data if isinstance(mu, Tensor) else np.asarray(mu, dtype=np.float64)
    x = x.values if isinstance(x, MelSpec) else np.asarray(x, dtype=np.float64)
    if mu.shape[1] != x.shape[0]:
        raise DimensionError(f"Token means have {mu.shape[1]} bins, mel has {x.shape[0]}")
    diff = mu[:, :, None] - x[None, :, :]
    return -0.5 * (diff * diff).sum(axis=1)


def mas_align(ll: np.ndarray) -> AlignmentPath:
    """
    Best monotonic surjective token-to-frame path by dynamic programming.

    Q[i, j] = ll[i, j] + max(Q[i, j−1], Q[i−1, j−1]); backtracking prefers
    staying on the current token when both predecessors tie.

    Raises:
        InfeasibleAlignmentError: If there are fewer frames than tokens
        NumericError: If ll has non-finite entries
    """
    ll = np.asarray(ll, dtype=np.float64)
    n_tokens, n_frames = ll.shape
    if n_frames < n_tokens:
        raise InfeasibleAlignmentError(f"Cannot align {n_tokens} tokens to {n_frames} frames")
    if not np.all(np.isfinite(ll)):
        raise NumericError("Likelihood matrix has non-finite entries", where="mas_align")

    q = np.full((n_tokens, n_frames), -np.inf)
    q[0, 0] = ll[0, 0]
    for j in range(1, n_frames):
        prev = q[:, j - 1]
        advance = np.concatenate([[-np.inf], prev[:-1]])
        q[:, j] = ll[:, j] + np.maximum(prev, advance)

    tokens = np.zeros(n_frames, dtype=np.int64)
    i = n_tokens - 1
    for j in range(n_frames - 1, -1, -1):
        tokens[j] = i
        if j > 0 and i > 0 and q[i - 1, j - 1] > q[i, j - 1]:
            i -= 1

    durations = np.bincount(tokens, minlength=n_tokens)
    assert tokens[0] == 0 and np.all(np.diff(tokens) >= 0), "alignment is not monotone"
    assert np.all(durations >= 1) and durations.sum() == n_frames, "alignment is not surjective"
    return AlignmentPath(durations=durations.tolist())


def path_score(ll: np.ndarray, path: AlignmentPath) -> float:
    """Sum of the likelihoods selected by a path."""
    tokens = path.frame_tokens()
    return float(np.asarray(ll)[tokens, np.arange(len(tokens))].sum())


def durations_to_path(durations: Sequence[int]) -> AlignmentPath:
    return AlignmentPath(durations=[int(d) for d in durations])


def path_matrix(path: AlignmentPath) -> np.ndarray:
    """L_p×T 0/1 matrix with a one at (token, frame) for every assigned frame."""
    tokens = path.frame_tokens()
    out = np.zeros((len(path.durations), len(tokens)))
    out[tokens, np.arange(len(tokens))] = 1.0
    return out


# ----------------------------------------------------- durations and losses

class DurationPredictor(Layer):
    """Two [conv k3, ReLU, LN] blocks and a per-token linear head over detached text states."""

    def __init__(self, store: ParamStore, name: str, channels: int, hidden: int, rng: np.random.Generator):
        super().__init__(store, name)
        self.conv1 = Conv1d(store, self.child("conv1"), channels, hidden, 3, rng)
        self.conv2 = Conv1d(store, self.child("conv2"), hidden, hidden, 3, rng)
        self.proj = Linear(store, self.child("proj"), hidden, 1, rng)

    def __call__(self, h_text: Tensor) -> Tensor:
        """L_p×C text states to L_p log durations."""
        x = stop_gradient(h_text).transpose()
        for conv in (self.conv1, self.conv2):
            x = normalize(conv(x).relu().transpose(), "layer").transpose()
        return self.proj(x.transpose()).reshape(h_text.shape[0])


def length_regulate(h: Tensor, path: AlignmentPath) -> Tensor:
    """
    Repeat row i of an L_p×C' matrix d_i times and lay frames out as C'×T.

    Raises:
        ContractError: If the durations sum to zero
        DimensionError: If the path has a different token count
    """
    if len(path.durations) != h.shape[0]:
        raise DimensionError(f"Path has {len(path.durations)} tokens, states have {h.shape[0]}")
    if path.total == 0:
        raise ContractError("Durations sum to zero")
    return take(h, path.frame_tokens(), axis=0).transpose()


def prior_loss(h_mel: Tensor, x: Union[MelSpec, np.ndarray]) -> Tensor:
    """Mean squared error between h_mel and the target mel."""
    target = x.values if isinstance(x, MelSpec) else np.asarray(x, dtype=np.float64)
    return mse(h_mel, target)


def duration_loss(log_durations: Tensor, path: AlignmentPath) -> Tensor:
    """
    Mean of (log d − log d̂)² over tokens.

    Raises:
        ContractError: If any target duration is zero
    """
    d = np.asarray(path.durations, dtype=np.float64)
    if np.any(d < 1):
        raise ContractError(f"Duration targets must be >= 1, got {path.durations}")
    if d.shape[0] != log_durations.shape[0]:
        raise DimensionError(f"{d.shape[0]} targets for {log_durations.shape[0]} predictions")
    diff = log_durations - np.log(d)
    return (diff * diff).mean()


def predicted_durations(log_durations: Union[Tensor, np.ndarray]) -> AlignmentPath:
    """
    max(1, round(exp(log d̂))) per token, halves rounded up and capped at
    MAX_TOKEN_FRAMES.

    Raises:
        NumericError: If a log-duration is NaN
    """
    values = log_durations.data if isinstance(log_durations, Tensor) else np.asarray(log_durations, dtype=np.float64)
    if np.any(np.isnan(values)):
        raise NumericError("Duration predictor produced NaN", where="predicted_durations")
    values = np.minimum(values, np.log(MAX_TOKEN_FRAMES))
    frames = np.maximum(1, np.floor(np.exp(values) + 0.5)).astype(np.int64)
    return AlignmentPath(durations=frames.tolist())


# ------------------------------------------------------------------ module

class AlignerOutput(BaseModel):
    """Everything the aligner produces for one training utterance."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    h_mel: Tensor
    path: AlignmentPath
    log_durations: Tensor
    dur_loss: Tensor
    prior_loss: Tensor


class Aligner(Layer):
    """Per-token mel projection plus duration predictor."""

    def __init__(self, store: ParamStore, name: str, config: ModelConfig, rng: np.random.Generator):
        super().__init__(store, name)
        self.proj = Linear(store, self.child("proj"), config.text.hidden, config.n_mels, rng)
        self.dp = DurationPredictor(store, self.child("dp"), config.text.hidden, config.dp_hidden, rng)

    def token_means(self, h_text: Tensor) -> Tensor:
        return self.proj(h_text)

    def forward_train(self, h_text: Tensor, mel: Union[MelSpec, np.ndarray]) -> AlignerOutput:
        """Align against the target mel with MAS and compute L_dur and L_prior."""
        target = mel.values if isinstance(mel, MelSpec) else np.asarray(mel, dtype=np.float64)
        mu = self.token_means(h_text)
        path = mas_align(mas_likelihoods(mu, target))
        h_mel = length_regulate(mu, path)
        log_d = self.dp(h_text)
        return AlignerOutput(
            h_mel=h_mel,
            path=path,
            log_durations=log_d,
            dur_loss=duration_loss(log_d, path),
            prior_loss=prior_loss(h_mel, target),
        )

    def infer(self, h_text: Tensor, durations: Optional[Sequence[int]] = None) -> Tuple[Tensor, AlignmentPath]:
        """h_mel from predicted (or given) durations."""
        if durations is not None:
            path = durations_to_path(durations)
        else:
            path = predicted_durations(self.dp(h_text))
        logger.debug(f"Inference durations: {path.durations}")
        return length_regulate(self.token_means(h_text), path), path


def write_alignment_csv(path: Union[str, Path], alignments: Iterable[Tuple[str, AlignmentPath]]) -> Path:
    """Dump (utterance, token, duration) rows."""
    rows = (
        (utterance, token, duration)
        for utterance, alignment in alignments
        for token, duration in enumerate(alignment.durations)
    )
    return write_csv(path, ["utterance", "token", "duration"], rows)
