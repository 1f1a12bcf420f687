"""
Checkpoint container ("DEXT").

Layout: magic, u32 version, JSON header (config, epoch, step, rng state,
optimizer scalars, parameter names), then the parameter tensors followed by
the optimizer moments named `adam.m.<param>` / `adam.v.<param>`.
"""
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from dextts.errors import CheckpointFormatError, InputError
from dextts.models import ModelConfig
from dextts.numerics.serialize import read_container, write_container
from dextts.pipeline import DexTTS

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DEXT"
CHECKPOINT_VERSION = 1


class Checkpoint(BaseModel):
    """Config, parameters, optimizer state, epoch and generator state of one training run."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: ModelConfig
    epoch: int = Field(0, ge=0)
    step: int = Field(0, ge=0)
    rng_state: Optional[Dict[str, Any]] = None
    params: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray] = Field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = Field(default_factory=dict)
    adam_step: int = 0
    lr: Optional[float] = None

    @classmethod
    def from_model(cls, model: DexTTS, epoch: int = 0, step: int = 0, optimizer=None,
                   rng: Optional[np.random.Generator] = None) -> "Checkpoint":
        m, v, t = optimizer.state_dict() if optimizer is not None else ({}, {}, 0)
        return cls(
            config=model.config,
            epoch=epoch,
            step=step,
            rng_state=rng.bit_generator.state if rng is not None else None,
            params=model.store.state_dict(),
            adam_m=m,
            adam_v=v,
            adam_step=t,
            lr=optimizer.lr if optimizer is not None else model.config.lr,
        )

    def to_model(self) -> DexTTS:
        """Build the model from the config and copy the stored parameters in."""
        model = DexTTS(self.config)
        model.store.load_state_dict(self.params)
        return model

    def restore_rng(self) -> Optional[np.random.Generator]:
        if self.rng_state is None:
            return None
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return rng

    def to_bytes(self) -> bytes:
        header = {
            "config": self.config.model_dump(mode="json"),
            "epoch": self.epoch,
            "step": self.step,
            "rng_state": self.rng_state,
            "optimizer": {"step": self.adam_step, "lr": self.lr},
            "params": list(self.params),
        }
        tensors = list(self.params.items())
        tensors += [(f"adam.m.{name}", value) for name, value in self.adam_m.items()]
        tensors += [(f"adam.v.{name}", value) for name, value in self.adam_v.items()]
        return write_container(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, tensors)

    @classmethod
    def from_bytes(cls, payload: bytes) -> "Checkpoint":
        """
        Raises:
            CheckpointFormatError: On wrong magic, version or missing tensors
        """
        version, header, tensors = read_container(payload, CHECKPOINT_MAGIC)
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"Unsupported checkpoint version {version}")
        arrays = dict(tensors)
        missing = [name for name in header["params"] if name not in arrays]
        if missing:
            raise CheckpointFormatError(f"Checkpoint is missing tensors {missing[:5]}")
        return cls(
            config=ModelConfig(**header["config"]),
            epoch=header["epoch"],
            step=header["step"],
            rng_state=header["rng_state"],
            params={name: arrays[name] for name in header["params"]},
            adam_m={n[len("adam.m."):]: a for n, a in tensors if n.startswith("adam.m.")},
            adam_v={n[len("adam.v."):]: a for n, a in tensors if n.startswith("adam.v.")},
            adam_step=header["optimizer"]["step"],
            lr=header["optimizer"]["lr"],
        )

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        logger.info(f"Saved checkpoint (epoch {self.epoch}, step {self.step}) to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        """
        Raises:
            InputError: If the file does not exist
            CheckpointFormatError: On a malformed file
        """
        path = Path(path)
        if not path.is_file():
            raise InputError(f"Checkpoint not found: {path}")
        ckpt = cls.from_bytes(path.read_bytes())
        logger.info(f"Loaded checkpoint {path} ({ckpt.config.mode.value}, epoch {ckpt.epoch})")
        return ckpt


def load_model(path: Union[str, Path]) -> DexTTS:
    return Checkpoint.load(path).to_model()
