"""
Binary tensor serialization and the tagged container format.

Tensor blob: little-endian u64 rank, u64 extents, raw little-endian doubles.
Container:   4-byte magic, u32 version, u64 header length + UTF-8 JSON header
             (sorted keys), u64 tensor count, then per tensor a u32 name
             length + UTF-8 name + tensor blob.
"""
import io
import json
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, List, Tuple, Union

import numpy as np

from dextts.errors import CheckpointFormatError

_LE_DOUBLE = np.dtype("<f8")


def write_tensor(stream: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=_LE_DOUBLE)
    stream.write(struct.pack("<Q", array.ndim))
    stream.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    stream.write(array.tobytes(order="C"))


def _read_exact(stream: BinaryIO, count: int) -> bytes:
    chunk = stream.read(count)
    if len(chunk) != count:
        raise CheckpointFormatError(f"Truncated stream: wanted {count} bytes, got {len(chunk)}")
    return chunk


def read_tensor(stream: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<Q", _read_exact(stream, 8))
    shape = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(stream, 8 * count), dtype=_LE_DOUBLE)
    return data.reshape(shape).astype(np.float64)


def dumps_header(header: Dict[str, Any]) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(magic: bytes, version: int, header: Dict[str, Any],
                    tensors: List[Tuple[str, np.ndarray]]) -> bytes:
    """Serialize a header and named tensors into container bytes."""
    if len(magic) != 4:
        raise ValueError("Container magic must be 4 bytes")
    stream = io.BytesIO()
    stream.write(magic)
    stream.write(struct.pack("<I", version))
    blob = dumps_header(header)
    stream.write(struct.pack("<Q", len(blob)))
    stream.write(blob)
    stream.write(struct.pack("<Q", len(tensors)))
    for name, array in tensors:
        encoded = name.encode("utf-8")
        stream.write(struct.pack("<I", len(encoded)))
        stream.write(encoded)
        write_tensor(stream, array)
    return stream.getvalue()


def read_container(payload: bytes, magic: bytes) -> Tuple[int, Dict[str, Any], List[Tuple[str, np.ndarray]]]:
    """
    Parse container bytes.

    Raises:
        CheckpointFormatError: On wrong magic or truncated content
    """
    stream = io.BytesIO(payload)
    found = stream.read(4)
    if found != magic:
        raise CheckpointFormatError(f"Bad magic {found!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(stream, 4))
    (length,) = struct.unpack("<Q", _read_exact(stream, 8))
    header = json.loads(_read_exact(stream, length).decode("utf-8"))
    (count,) = struct.unpack("<Q", _read_exact(stream, 8))
    tensors = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(stream, 4))
        name = _read_exact(stream, name_len).decode("utf-8")
        tensors.append((name, read_tensor(stream)))
    if stream.read(1):
        raise CheckpointFormatError("Trailing bytes after container payload")
    return version, header, tensors


def load_container(path: Union[str, Path], magic: bytes):
    return read_container(Path(path).read_bytes(), magic)
