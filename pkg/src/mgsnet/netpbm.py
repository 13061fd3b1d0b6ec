"""Binary PPM (P6) / PGM (P5) reading and writing.

Images load as (1, C, H, W) float64 tensors scaled to [0, 1]. Depth maps are
16-bit PGMs holding millimetres (metres = raw / 1000).
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEPTH_SCALE = 1000.0


class NetpbmError(ValueError):
    pass


def _header(buf: bytes):
    """Parse magic, width, height, maxval; return them and the payload offset."""
    if len(buf) < 2:
        raise NetpbmError("truncated header at byte 0: missing magic number")
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {magic!r} at byte 0 (expected P5 or P6)")
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        # whitespace and comments before each field
        while pos < len(buf):
            ch = buf[pos:pos + 1]
            if ch.isspace():
                pos += 1
            elif ch == b"#":
                nl = buf.find(b"\n", pos)
                pos = len(buf) if nl < 0 else nl + 1
            else:
                break
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise NetpbmError(f"missing {name} at byte {start}")
        values.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise NetpbmError(f"expected single whitespace after maxval at byte {pos}")
    width, height, maxval = values
    if width < 1 or height < 1:
        raise NetpbmError(f"invalid dimensions {width}x{height} at byte 2")
    if maxval not in (255, 65535):
        raise NetpbmError(f"unsupported maxval {maxval} (expected 255 or 65535)")
    return magic, width, height, maxval, pos + 1


def read_raw(path: str | Path) -> tuple[np.ndarray, int]:
    """Raw integer samples as (C, H, W) and the maxval."""
    buf = Path(path).read_bytes()
    magic, width, height, maxval, offset = _header(buf)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    need = offset + count * dtype.itemsize
    if len(buf) < need:
        raise NetpbmError(
            f"{path}: payload truncated at byte {len(buf)}, expected {need} bytes"
        )
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    return data.reshape(height, width, channels).transpose(2, 0, 1).astype(np.int64), maxval


def load_image(path: str | Path) -> np.ndarray:
    raw, maxval = read_raw(path)
    return (raw / maxval)[None]


def load_depth(path: str | Path) -> np.ndarray:
    """Depth in metres as (1, 1, H, W); zero marks missing depth."""
    raw, _ = read_raw(path)
    if raw.shape[0] != 1:
        raise NetpbmError(f"{path}: depth must be a single-channel PGM")
    return (raw / DEPTH_SCALE)[None]


def _write(path: str | Path, raw: np.ndarray, maxval: int) -> None:
    c, h, w = raw.shape
    magic = {1: b"P5", 3: b"P6"}.get(c)
    if magic is None:
        raise NetpbmError(f"can only write 1- or 3-channel images, got {c}")
    dtype = ">u2" if maxval > 255 else "u1"
    payload = np.ascontiguousarray(raw.transpose(1, 2, 0)).astype(dtype).tobytes()
    Path(path).write_bytes(magic + b"\n%d %d\n%d\n" % (w, h, maxval) + payload)


def quantize(x: np.ndarray, maxval: int) -> np.ndarray:
    """Round half up onto 0..maxval, clamping out-of-range values."""
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        log.warning("values outside [0, 1] clamped before quantization")
        x = np.clip(x, 0.0, 1.0)
    return np.floor(x * maxval + 0.5).astype(np.int64)


def save_image(x: np.ndarray, path: str | Path, bitdepth: int = 8) -> None:
    """Write a (C, H, W) or (1, C, H, W) map in [0, 1] as PGM/PPM."""
    if bitdepth not in (8, 16):
        raise ValueError(f"bitdepth must be 8 or 16, got {bitdepth}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise NetpbmError("save_image writes a single image")
        x = x[0]
    if x.ndim == 2:
        x = x[None]
    maxval = 255 if bitdepth == 8 else 65535
    _write(path, quantize(x, maxval), maxval)


def save_depth(depth: np.ndarray, path: str | Path) -> None:
    """Write metres as a 16-bit millimetre PGM."""
    d = np.asarray(depth, dtype=np.float64).reshape(-1, *np.shape(depth)[-2:])
    raw = np.floor(d * DEPTH_SCALE + 0.5)
    if raw.min() < 0 or raw.max() > 65535:
        log.warning("depth outside the 16-bit millimetre range clamped")
    _write(path, np.clip(raw, 0, 65535).astype(np.int64)[:1], 65535)
