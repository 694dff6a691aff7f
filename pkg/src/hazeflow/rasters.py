"""Flat binary container for 2D single-precision rasters.

Layout (little-endian):

    bytes 0..3    magic b"RSTR"
    bytes 4..7    uint32 height
    bytes 8..11   uint32 width
    bytes 12..    float32 payload, row-major, height*width values

Arrays round-trip bit-exactly, which the reproducibility contracts rely on.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import DataError, ValidationError

MAGIC = b"RSTR"
RASTER_SUFFIX = ".raster"


def as_raster(arr: np.ndarray, name: str = "raster") -> np.ndarray:
    """Validate and return a 2D float32 view of ``arr``."""
    a = np.asarray(arr)
    if a.ndim != 2:
        raise ValidationError(f"{name} must be 2D, got shape {a.shape}")
    return np.ascontiguousarray(a, dtype=np.float32)


def require_same_shape(*arrays: np.ndarray) -> None:
    shapes = {np.asarray(a).shape for a in arrays}
    if len(shapes) > 1:
        raise ValidationError(f"shape mismatch: {sorted(shapes)}")


def require_finite(arr: np.ndarray, name: str = "raster") -> None:
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")


def write_raster(path: str | os.PathLike, arr: np.ndarray) -> None:
    a = as_raster(arr)
    h, w = a.shape
    header = MAGIC + np.array([h, w], dtype="<u4").tobytes()
    payload = a.astype("<f4", copy=False).tobytes()
    Path(path).write_bytes(header + payload)


def read_raster(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise DataError(f"{path}: not a raster container (bad magic)")
    h, w = (int(v) for v in np.frombuffer(raw[4:12], dtype="<u4"))
    expected = 12 + 4 * h * w
    if len(raw) != expected:
        raise DataError(f"{path}: truncated payload ({len(raw)} != {expected} bytes)")
    data = np.frombuffer(raw[12:], dtype="<f4").reshape(h, w)
    return np.ascontiguousarray(data, dtype=np.float32)
