"""4-D float64 tensors and the MGST binary container.

Tensors are plain ``numpy.ndarray`` objects of shape (N, C, H, W) and dtype
float64. The container layout is::

    b"MGST" | u32 rank (=4) | 4 x u32 extents | N*C*H*W x f64, little-endian, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"MGST"
_HEADER = struct.Struct("<4sIIIII")


class ShapeError(ValueError):
    """Raised when tensor extents are inconsistent with an operation."""


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Validate ``x`` as a finite 4-D float64 tensor and return it as such."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"{name}: expected 4-D (N, C, H, W) tensor, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{name}: contains non-finite values")
    return arr


def zeros(n: int, c: int, h: int, w: int) -> np.ndarray:
    return np.zeros((n, c, h, w), dtype=np.float64)


def tensor_to_bytes(x: np.ndarray) -> bytes:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"MGST stores rank-4 tensors only, got shape {arr.shape}")
    header = _HEADER.pack(MAGIC, 4, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (tensor, end offset)."""
    if len(buf) - offset < _HEADER.size:
        raise ValueError(f"MGST: truncated header at byte {offset}")
    magic, rank, n, c, h, w = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise ValueError(f"MGST: bad magic {magic!r} at byte {offset}")
    if rank != 4:
        raise ValueError(f"MGST: unsupported rank {rank} at byte {offset + 4}")
    start = offset + _HEADER.size
    end = start + 8 * n * c * h * w
    if end > len(buf):
        raise ValueError(
            f"MGST: payload truncated at byte {len(buf)}, expected {end} bytes"
        )
    data = np.frombuffer(buf, dtype="<f8", count=n * c * h * w, offset=start)
    return data.astype(np.float64).reshape(n, c, h, w), end


def write_tensor(target: str | Path | BinaryIO, x: np.ndarray) -> None:
    payload = tensor_to_bytes(x)
    if hasattr(target, "write"):
        target.write(payload)
    else:
        Path(target).write_bytes(payload)


def read_tensor(source: str | Path | BinaryIO) -> np.ndarray:
    buf = source.read() if hasattr(source, "read") else Path(source).read_bytes()
    x, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise ValueError(f"MGST: {len(buf) - end} trailing bytes after tensor")
    return x
