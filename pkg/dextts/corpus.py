"""
Deterministic toy corpus.

Each token stamps a Gaussian band at its own center frequency over its
frames. A per-utterance global gain and spectral tilt give time-invariant
variation; a sinusoidal contour shifting the bands over time gives
time-variant variation and doubles as the log-F0 track. Mels are
standardized corpus-wide.
"""
import hashlib
import logging
import math
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from dextts.errors import CheckpointFormatError, InputError
from dextts.models import MelSpec, PhonemeSeq
from dextts.numerics.serialize import load_container, read_container, write_container

logger = logging.getLogger(__name__)

CORPUS_MAGIC = b"DEXC"
CORPUS_VERSION = 1

# Band center shift (in mel bins) per unit of contour.
CONTOUR_SHIFT = 0.5


class Utterance(BaseModel):
    """One (phonemes, mel, log-F0) triple with its generating durations."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    name: str
    phonemes: PhonemeSeq
    mel: MelSpec
    log_f0: np.ndarray
    durations: List[int]


class ToyCorpus(BaseModel):
    """Seeded list of utterances plus the standardization constants."""

    seed: int
    vocab: int = Field(..., ge=1)
    n_mels: int = Field(..., ge=1)
    mel_mean: float = 0.0
    mel_std: float = 1.0
    utterances: List[Utterance] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.utterances)

    def __getitem__(self, index: int) -> Utterance:
        return self.utterances[index]

    def to_bytes(self) -> bytes:
        header = {
            "seed": self.seed,
            "vocab": self.vocab,
            "n_mels": self.n_mels,
            "mel_mean": self.mel_mean,
            "mel_std": self.mel_std,
            "utterances": [
                {"name": u.name, "ids": u.phonemes.ids, "durations": u.durations,
                 "sample_rate": u.mel.sample_rate, "hop_length": u.mel.hop_length}
                for u in self.utterances
            ],
        }
        tensors = []
        for u in self.utterances:
            tensors.append((f"{u.name}.mel", u.mel.values))
            tensors.append((f"{u.name}.log_f0", u.log_f0))
        return write_container(CORPUS_MAGIC, CORPUS_VERSION, header, tensors)

    @classmethod
    def from_bytes(cls, payload: bytes) -> "ToyCorpus":
        version, header, tensors = read_container(payload, CORPUS_MAGIC)
        return cls._from_parts(version, header, tensors)

    @classmethod
    def _from_parts(cls, version: int, header: dict, tensors: list) -> "ToyCorpus":
        if version != CORPUS_VERSION:
            raise CheckpointFormatError(f"Unsupported corpus version {version}")
        arrays = dict(tensors)
        utterances = []
        for entry in header["utterances"]:
            name = entry["name"]
            try:
                mel, f0 = arrays[f"{name}.mel"], arrays[f"{name}.log_f0"]
            except KeyError as e:
                raise CheckpointFormatError(f"Corpus is missing tensor {e}") from e
            utterances.append(Utterance(
                name=name,
                phonemes=PhonemeSeq(ids=entry["ids"]),
                mel=MelSpec(values=mel, sample_rate=entry["sample_rate"], hop_length=entry["hop_length"]),
                log_f0=f0,
                durations=entry["durations"],
            ))
        return cls(seed=header["seed"], vocab=header["vocab"], n_mels=header["n_mels"],
                   mel_mean=header["mel_mean"], mel_std=header["mel_std"], utterances=utterances)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        logger.info(f"Saved corpus of {len(self)} utterances to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ToyCorpus":
        """
        Raises:
            InputError: If the file does not exist
            CheckpointFormatError: On a malformed file
        """
        path = Path(path)
        if not path.is_file():
            raise InputError(f"Corpus file not found: {path}")
        corpus = cls._from_parts(*load_container(path, CORPUS_MAGIC))
        logger.info(f"Loaded corpus of {len(corpus)} utterances from {path}")
        return corpus

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def band_centers(vocab: int, n_mels: int) -> np.ndarray:
    """Distinct band center (in bins) per token: (k + 0.5)·F / vocab."""
    return (np.arange(vocab) + 0.5) * n_mels / vocab


def random_durations(rng: np.random.Generator, frames: int, tokens: int) -> List[int]:
    """A uniformly drawn composition of `frames` into `tokens` positive parts."""
    if tokens == 1:
        return [frames]
    cuts = np.sort(rng.choice(frames - 1, size=tokens - 1, replace=False)) + 1
    return np.diff(np.concatenate([[0], cuts, [frames]])).astype(int).tolist()


def render_mel(ids: List[int], durations: List[int], contour: np.ndarray, gain: float, tilt: float,
               vocab: int, n_mels: int) -> np.ndarray:
    """Raw (unstandardized) F×T mel of one utterance."""
    centers = band_centers(vocab, n_mels)
    width = max(0.75, n_mels / (2.0 * vocab))
    bins = np.arange(n_mels)[:, None]
    frame_centers = np.repeat(centers[ids], durations) + CONTOUR_SHIFT * contour
    bands = np.exp(-0.5 * ((bins - frame_centers[None, :]) / width) ** 2)
    return 2.0 * bands + gain + tilt * (bins / n_mels - 0.5)


def synth_corpus(seed: int, n_utts: int, vocab: int = 12, n_mels: int = 16,
                 t_range: Tuple[int, int] = (24, 48), sample_rate: int = 22050, hop_length: int = 256,
                 stats: Optional[Tuple[float, float]] = None, prefix: str = "utt") -> ToyCorpus:
    """
    Generate a corpus deterministically from `seed`.

    Args:
        seed: Generator seed
        n_utts: Number of utterances (>= 1)
        vocab: Token vocabulary size
        n_mels: Mel bins F
        t_range: Inclusive frame count range
        stats: (mean, std) to standardize with; computed from this corpus when None
        prefix: Utterance name prefix

    Raises:
        InputError: On n_utts < 1 or an invalid frame range
    """
    if n_utts < 1:
        raise InputError(f"Corpus needs at least one utterance, got {n_utts}")
    t_lo, t_hi = t_range
    if not 2 <= t_lo <= t_hi:
        raise InputError(f"Invalid frame range {t_range}")
    rng = np.random.default_rng(seed)

    raw = []
    for k in range(n_utts):
        frames = int(rng.integers(t_lo, t_hi + 1))
        n_tokens = int(rng.integers(2, max(2, frames // 3) + 1))
        ids = rng.integers(0, vocab, size=n_tokens).tolist()
        durations = random_durations(rng, frames, n_tokens)
        gain = float(rng.normal(0.0, 0.3))
        tilt = float(rng.normal(0.0, 0.5))
        amplitude = float(rng.uniform(0.5, 1.5))
        period = float(rng.uniform(8.0, 24.0))
        phase = float(rng.uniform(0.0, 2.0 * math.pi))
        contour = amplitude * np.sin(2.0 * math.pi * np.arange(frames) / period + phase)
        mel = render_mel(ids, durations, contour, gain, tilt, vocab, n_mels)
        raw.append((f"{prefix}{k:04d}", ids, durations, mel, contour))

    if stats is None:
        values = np.concatenate([mel.reshape(-1) for _, _, _, mel, _ in raw])
        stats = (float(values.mean()), float(values.std()))
    mean, std = stats

    utterances = [
        Utterance(
            name=name,
            phonemes=PhonemeSeq(ids=ids),
            mel=MelSpec(values=(mel - mean) / std, sample_rate=sample_rate, hop_length=hop_length),
            log_f0=contour,
            durations=durations,
        )
        for name, ids, durations, mel, contour in raw
    ]
    logger.info(f"Synthesized {n_utts} utterances (seed {seed}, vocab {vocab}, {n_mels} bins)")
    return ToyCorpus(seed=seed, vocab=vocab, n_mels=n_mels, mel_mean=mean, mel_std=std, utterances=utterances)
