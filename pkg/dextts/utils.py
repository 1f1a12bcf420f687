"""
Utility functions for dextts: CSV tables, mel images, hashing, id lists.
"""

import csv
import hashlib
import logging
from pathlib import Path
from typing import Any, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
from PIL import Image

from dextts.errors import InputError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Union[Sequence[Any], Mapping[str, Any]]]) -> Path:
    """
    Write a CSV table with a header row.

    Rows may be sequences (in header order) or mappings keyed by header names.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            if isinstance(row, Mapping):
                row = [row.get(name, "") for name in header]
            writer.writerow([_format_cell(v) for v in row])
            count += 1
    logger.debug(f"Wrote {count} rows to {path}")
    return path


def _format_cell(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def read_csv_rows(path: PathLike) -> List[dict]:
    """Read a CSV table with a header row into dicts of strings."""
    with Path(path).open(newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def write_matrix_csv(path: PathLike, values: np.ndarray) -> Path:
    """Write a 2-D matrix as headerless CSV, one row per matrix row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.atleast_2d(values), delimiter=",", fmt="%.17g")
    return path


def read_matrix_csv(path: PathLike) -> np.ndarray:
    """
    Read a headerless numeric CSV.

    Raises:
        InputError: If the file is missing, empty or contains non-finite values
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"File not found: {path}")
    try:
        values = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as e:
        raise InputError(f"Could not parse {path} as a numeric CSV: {e}") from e
    if values.size == 0:
        raise InputError(f"{path} is empty")
    if not np.all(np.isfinite(values)):
        raise InputError(f"{path} contains non-finite values")
    return values


def read_vector_csv(path: PathLike) -> np.ndarray:
    """Read a single track (one row or one column) as a 1-D array."""
    return read_matrix_csv(path).reshape(-1)


def mel_to_image(values: np.ndarray) -> Image.Image:
    """
    Grayscale image of a F×T mel: row = mel bin (low bins at the bottom), column = frame.

    Values are min/max normalized to 0..255.
    """
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    scaled = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    pixels = np.round(scaled[::-1] * 255.0).astype(np.uint8)
    return Image.fromarray(pixels)


def save_mel_image(path: PathLike, values: np.ndarray) -> Path:
    """Save a mel image; the suffix picks the format (.png or .pgm)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mel_to_image(values).save(path)
    logger.info(f"Saved mel image {path}")
    return path


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def parse_int_list(text: Optional[str], name: str = "list") -> List[int]:
    """
    Parse "3,1,4" (spaces allowed) into integers.

    Raises:
        InputError: On an empty list or a non-integer entry
    """
    if text is None or not text.strip():
        raise InputError(f"Empty {name}")
    try:
        return [int(part) for part in text.replace(" ", "").split(",") if part]
    except ValueError as e:
        raise InputError(f"Could not parse {name} '{text}': {e}") from e


def parse_str_list(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]
