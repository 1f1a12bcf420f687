"""
Named parameter store and seeded initializers.

Every weight of the model lives here under a dotted path
("decoder.dit.0.attn.qkv.weight"). Iteration order is insertion order, which
is the construction order of the model and therefore stable across
save/load.
"""
import logging
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from dextts.errors import CheckpointFormatError, ConfigError
from dextts.numerics.tensor import Tensor

logger = logging.getLogger(__name__)


def xavier_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int,
                   gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class ParamStore:
    """Ordered map from name to Tensor; trainable parameters plus buffers."""

    def __init__(self):
        self._tensors: Dict[str, Tensor] = {}
        self._trainable: Dict[str, bool] = {}

    def create(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        """
        Register a new entry.

        Raises:
            ConfigError: If the name is already taken
        """
        if name in self._tensors:
            raise ConfigError(f"Parameter name registered twice: {name}")
        tensor = Tensor(value, requires_grad=trainable)
        self._tensors[name] = tensor
        self._trainable[name] = trainable
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def parameters(self) -> List[Tuple[str, Tensor]]:
        """Trainable entries in registration order."""
        return [(n, t) for n, t in self._tensors.items() if self._trainable[n]]

    def buffers(self) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self._tensors.items() if not self._trainable[n]]

    def num_parameters(self) -> int:
        return int(sum(t.size for _, t in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self._tensors.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        """
        Copy arrays into the registered tensors (in place).

        Raises:
            CheckpointFormatError: On missing/unexpected names or shape mismatch
        """
        missing = [n for n in self._tensors if n not in state]
        unexpected = [n for n in state if n not in self._tensors]
        if strict and (missing or unexpected):
            raise CheckpointFormatError(f"State mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, tensor in self._tensors.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise CheckpointFormatError(f"Shape mismatch for {name}: {value.shape} vs {tensor.shape}")
            tensor.data[...] = value
        logger.debug(f"Loaded {len(state)} tensors into store")

    def set_value(self, name: str, value: np.ndarray) -> None:
        """Overwrite one entry in place (used for buffers and tests)."""
        tensor = self._tensors[name]
        tensor.data[...] = np.asarray(value, dtype=np.float64)

    def get(self, name: str) -> Optional[Tensor]:
        return self._tensors.get(name)
