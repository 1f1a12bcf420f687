"""
Data Models for the DEX-TTS acoustic model

Pydantic models for hyperparameters, the diffusion noise schedule, mel
spectrograms, alignments and run reports, plus the named config profiles.
"""

import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from dextts.errors import ConfigError

# Set up logging
logger = logging.getLogger(__name__)


class Mode(str, Enum):
    """Model variants"""
    DEX = "dex"  # reference-conditioned
    GEDEX = "gedex"  # reference-free backbone


class EmbeddingKind(str, Enum):
    """Patch embedding used before the DiT blocks"""
    SIN_COS = "sin-cos"
    TIME_FREQ = "time-freq"
    POS_FREQ = "pos-freq"
    CONV_FREQ = "conv-freq"


class TextEncoderConfig(BaseModel):
    """Transformer text encoder hyperparameters"""

    layers: int = Field(8, ge=1, description="Number of encoder layers N")
    hidden: int = Field(192, ge=2, description="Hidden size C")
    heads: int = Field(2, ge=1, description="Attention heads h")
    rope_base: float = Field(10000.0, gt=1.0, description="Rotary frequency base")
    vocab: int = Field(64, ge=1, description="Phoneme vocabulary size")
    ffn_ratio: int = Field(4, ge=1, description="FFN inner width as a multiple of C")

    @model_validator(mode="after")
    def validate_heads(self) -> "TextEncoderConfig":
        """Head dimension must be an integer and even (rotary pairs)"""
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if (self.hidden // self.heads) % 2:
            raise ValueError(f"head dimension {self.hidden // self.heads} must be even for rotary pairing")
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


class NoiseSchedule(BaseModel):
    """Noise levels with sigma_t = t"""

    sigma_min: float = Field(0.002, gt=0, description="Smallest sampling noise level")
    sigma_max: float = Field(80.0, gt=0, description="Largest sampling noise level")
    rho: float = Field(7.0, ge=1.0, description="Time-step discretization exponent")
    sigma_data: float = Field(0.5, gt=0, description="Expected data standard deviation")
    estimate_sigma_data: bool = Field(
        True, description="At training time set sigma_data to the corpus std and scale sigma_max by it")
    p_mean: float = Field(-1.2, description="Mean of ln t during training")
    p_std: float = Field(1.2, gt=0, description="Std of ln t during training")

    @model_validator(mode="after")
    def validate_range(self) -> "NoiseSchedule":
        """sigma_min must be below sigma_max"""
        if not self.sigma_min < self.sigma_max:
            raise ValueError(f"sigma_min {self.sigma_min} must be < sigma_max {self.sigma_max}")
        return self


class ModelConfig(BaseModel):
    """Complete hyperparameter record of one model"""

    mode: Mode = Field(Mode.DEX, description="dex (reference-conditioned) or gedex (reference-free)")
    seed: int = Field(0, ge=0, description="Seed for init, data order and noise draws")

    # mel front-end metadata (mels are given, never extracted here)
    n_mels: int = Field(80, ge=1, description="Mel bins F")
    n_fft: int = Field(1024, ge=1, description="FFT size")
    hop_length: int = Field(256, ge=1, description="Hop size in samples")
    win_length: int = Field(1024, ge=1, description="Window size in samples")
    sample_rate: int = Field(22050, ge=1, description="Sample rate in Hz")

    text: TextEncoderConfig = Field(default_factory=TextEncoderConfig)
    dp_hidden: int = Field(192, ge=1, description="Duration predictor channels")

    # diffusion decoder
    hidden: int = Field(64, ge=2, description="Decoder hidden size C")
    patch_size: int = Field(2, ge=1, description="Patch size P")
    dit_blocks: int = Field(4, ge=0, description="Number of DiT blocks N")
    dit_heads: int = Field(2, ge=1, description="Attention heads per DiT block")
    mlp_ratio: int = Field(4, ge=1, description="DiT MLP width as a multiple of C")
    overlap: bool = Field(True, description="Overlapping patchify (kernel 2P-1) instead of kernel P")
    embedding: EmbeddingKind = Field(EmbeddingKind.CONV_FREQ, description="Patch embedding kind")
    max_time_patches: int = Field(64, ge=1, description="Trained time extent of the time-freq embedding")
    prior_mean: bool = Field(False, description="Start sampling from h_mel + sigma_max*eps")

    # style encoders and adapters
    style_layers: int = Field(6, ge=1, description="Style encoder depth L")
    codebook_size: int = Field(512, ge=1, description="Codebook rows K")
    codebook_dim: int = Field(192, ge=1, description="Codebook dimension D")
    commitment_weight: float = Field(0.25, ge=0, description="Weight of L_vq in the total loss")
    ema_decay: float = Field(0.99, gt=0, lt=1, description="Codebook EMA decay")
    use_tiv: bool = Field(True, description="Use time-invariant styles")
    use_tv: bool = Field(True, description="Use time-variant styles")
    use_pitch: bool = Field(True, description="Add pitch embedding to time-variant styles")
    tv_attention_scale: bool = Field(False, description="Scale T-V adapter logits by 1/sqrt(C)")
    tv_residual: bool = Field(True, description="Add the T-V adapter output to its input")

    schedule: NoiseSchedule = Field(default_factory=NoiseSchedule)
    diffusion_draws: int = Field(1, ge=1, description="Noise levels drawn per utterance and averaged in L_diff")

    # training
    lr: float = Field(1e-4, gt=0, description="Adam learning rate")
    batch_size: int = Field(32, ge=1, description="Utterances per step")
    epochs: int = Field(1000, ge=0, description="Passes over the corpus")
    save_every: int = Field(0, ge=0, description="Checkpoint every k epochs (0 = only at the end)")
    grad_clip: float = Field(1.0, ge=0, description="Global gradient-norm clip (0 disables)")
    max_loss: float = Field(1e6, gt=0, description="Divergence threshold on the total loss")
    nfe: int = Field(50, ge=1, description="Default sampler steps")

    @model_validator(mode="after")
    def validate_decoder(self) -> "ModelConfig":
        """Cross-field checks for the decoder"""
        if self.hidden % self.dit_heads:
            raise ValueError(f"hidden {self.hidden} not divisible by dit_heads {self.dit_heads}")
        if self.hidden % 2:
            raise ValueError(f"hidden {self.hidden} must be even for sinusoidal embeddings")
        return self

    @property
    def reference_free(self) -> bool:
        return self.mode == Mode.GEDEX

    @property
    def style_dim(self) -> Optional[int]:
        """Dimension of h_e_v fed to the text encoder, None when no T-V style reaches it"""
        return self.hidden if (not self.reference_free and self.use_tv) else None


class MelSpec(BaseModel):
    """F×T mel-spectrogram with its framing metadata"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray = Field(..., description="F×T matrix")
    sample_rate: int = Field(22050, ge=1)
    hop_length: int = Field(256, ge=1)

    @field_validator("values")
    @classmethod
    def validate_values(cls, v: np.ndarray) -> np.ndarray:
        """Values must be a finite 2-D matrix with at least one frame"""
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"MelSpec values must be F×T with F,T >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("MelSpec values must be finite")
        return v

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    @property
    def duration_seconds(self) -> float:
        return self.frames * self.hop_length / self.sample_rate


class PhonemeSeq(BaseModel):
    """Token ids of one utterance"""

    ids: List[int] = Field(..., min_length=1, description="Token ids in [0, vocab)")

    @field_validator("ids")
    @classmethod
    def validate_ids(cls, v: List[int]) -> List[int]:
        """Ids are non-negative"""
        if any(i < 0 for i in v):
            raise ValueError(f"Token ids must be non-negative, got {v}")
        return v

    def __len__(self) -> int:
        return len(self.ids)


class AlignmentPath(BaseModel):
    """Per-token frame counts of a monotonic alignment"""

    durations: List[int] = Field(..., min_length=1)

    @field_validator("durations")
    @classmethod
    def validate_durations(cls, v: List[int]) -> List[int]:
        """Durations are non-negative"""
        if any(d < 0 for d in v):
            raise ValueError(f"Durations must be non-negative, got {v}")
        return [int(d) for d in v]

    @property
    def total(self) -> int:
        return int(sum(self.durations))

    def frame_tokens(self) -> np.ndarray:
        """Token index of every frame"""
        return np.repeat(np.arange(len(self.durations)), self.durations)


class LossComponents(BaseModel):
    """The four training losses and their weighted sum"""

    dur: float
    prior: float
    diff: float
    vq: float
    total: float

    def as_row(self) -> Dict[str, float]:
        return {"L_dur": self.dur, "L_prior": self.prior, "L_diff": self.diff, "L_vq": self.vq, "total": self.total}


class RunReportRow(BaseModel):
    """One timed synthesis"""

    nfe: int = Field(..., ge=1)
    repeat: int = Field(..., ge=0)
    mse: float = Field(..., ge=0, description="Sample MSE against the target mel")
    seconds: float = Field(..., ge=0, description="Wall-clock synthesis time")
    frames: int = Field(..., ge=1)
    rtf: float = Field(..., ge=0)


class RunReport(BaseModel):
    """NFE/RTF sweep results"""

    hop_length: int
    sample_rate: int
    rows: List[RunReportRow] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_rtf(self):
        """The RTF column must agree with the raw columns"""
        for row in self.rows:
            expected = row.seconds / (row.frames * self.hop_length / self.sample_rate)
            if not math.isclose(row.rtf, expected, rel_tol=1e-9, abs_tol=1e-12):
                raise ValueError(f"RTF {row.rtf} inconsistent with recomputed {expected} for nfe={row.nfe}")
        return self

    def mean_rtf(self, nfe: int) -> float:
        values = [r.rtf for r in self.rows if r.nfe == nfe]
        return float(np.mean(values)) if values else float("nan")


class AblationRow(BaseModel):
    """One embedding/patch variant of the ablation harness"""

    kind: EmbeddingKind
    overlap: bool
    patch_size: int
    params: int
    train_loss: float
    eval_mse: Optional[float] = None
    long_mse: Optional[float] = None
    long_status: str = "ok"


# ------------------------------------------------------------------ profiles

def _full_scale() -> Dict[str, Any]:
    return {}


def _full_scale_gedex() -> Dict[str, Any]:
    return {"mode": "gedex", "patch_size": 4, "epochs": 2000}


def _toy() -> Dict[str, Any]:
    return {
        "n_mels": 16,
        "text": {"layers": 2, "hidden": 32, "heads": 2, "vocab": 12},
        "dp_hidden": 32,
        "hidden": 32,
        "patch_size": 2,
        "dit_blocks": 2,
        "dit_heads": 2,
        "style_layers": 3,
        "codebook_size": 32,
        "codebook_dim": 48,
        "lr": 2e-3,
        "batch_size": 4,
        "epochs": 150,
        "max_time_patches": 12,
        "diffusion_draws": 4,
    }


def _toy_gedex() -> Dict[str, Any]:
    values = _toy()
    values["mode"] = "gedex"
    return values


PROFILES = {
    "paper-default": _full_scale,
    "paper-gedex": _full_scale_gedex,
    "toy": _toy,
    "toy-gedex": _toy_gedex,
}


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def profile_config(name: str, **overrides: Any) -> ModelConfig:
    """
    Build a named profile.

    Raises:
        ConfigError: If the profile name is unknown
    """
    if name not in PROFILES:
        raise ConfigError(f"Unknown profile '{name}', choose from {sorted(PROFILES)}")
    return ModelConfig(**_merge(PROFILES[name](), overrides))


def load_config(source: Union[str, Path], **overrides: Any) -> ModelConfig:
    """
    Load a config from a profile name or a TOML file of ModelConfig fields.

    A TOML file may name its base profile with `profile = "toy"`; the other
    keys override that profile.

    Raises:
        ConfigError: If the source is neither a profile nor a readable file
        pydantic.ValidationError: If the values violate ModelConfig
    """
    source = str(source)
    if source in PROFILES:
        return profile_config(source, **overrides)
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"Config '{source}' is neither a profile nor a file")
    with path.open("rb") as f:
        values = tomllib.load(f)
    base = values.pop("profile", "paper-default")
    logger.info(f"Loaded config file {path} (base profile {base})")
    return profile_config(base, **_merge(values, overrides))
