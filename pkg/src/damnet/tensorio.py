"""Binary tensor file format (DAT1) and PGM previews.

DAT1 layout: magic bytes ``DAM1``, u32 little-endian rank, u32 dims[rank],
then the payload as little-endian float32 in C order (channel-major,
row-major). Float64 arrays are narrowed to float32 on write.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"DAM1"


def write_dat1(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def read_dat1(path) -> np.ndarray:
    """Read a DAT1 file back as float64."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ConfigError(f"{path}: not a DAT1 file (bad magic {raw[:4]!r})")
    (rank,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    if payload.size != count:
        raise ConfigError(f"{path}: truncated payload ({payload.size} of {count})")
    return payload.astype(np.float64).reshape(dims)


def write_pgm(path, image: np.ndarray, max_value: float | None = None) -> None:
    """Write a (height, width) array as binary 8-bit PGM (P5).

    With ``max_value`` unset the data range is rescaled linearly to [0, 255]
    (a constant image becomes all zeros). With ``max_value`` given, values are
    scaled by 255/max_value, which keeps label images stable across files.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM export needs a rank-2 array")
    if max_value is None:
        lo, hi = float(img.min()), float(img.max())
        scaled = np.zeros_like(img) if hi == lo else (img - lo) * (255.0 / (hi - lo))
    else:
        if max_value <= 0:
            raise ValueError("max_value must be positive")
        scaled = img * (255.0 / max_value)
    data = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes(order="C"))
