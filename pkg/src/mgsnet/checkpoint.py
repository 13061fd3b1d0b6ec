"""Checkpoints: a text index followed by one MGST tensor per parameter.

::

    MGSCKPT 1
    config size = 64x64
    ...
    param enc1.weight 0 16 3 3 3
    param enc1.bias 3496 16 1 1 1
    end
    <MGST blobs, offsets relative to the first byte after "end\\n">

Biases are stored as (outC, 1, 1, 1) tensors.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import ConfigError, format_config, parse_config
from .net import SaliencyNet
from .tensor import ShapeError, tensor_from_bytes, tensor_to_bytes

HEADER = b"MGSCKPT 1\n"


def _as4d(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape + (1,) * (4 - a.ndim))


def save_checkpoint(path: str | Path, net: SaliencyNet) -> None:
    lines = [f"config {line}" for line in format_config(net.config).splitlines()]
    blobs, offset = [], 0
    for name in sorted(net.params):
        arr = _as4d(net.params[name])
        blob = tensor_to_bytes(arr)
        lines.append(f"param {name} {offset} {' '.join(str(d) for d in arr.shape)}")
        blobs.append(blob)
        offset += len(blob)
    index = "\n".join(lines) + "\nend\n"
    Path(path).write_bytes(HEADER + index.encode("utf-8") + b"".join(blobs))


def load_checkpoint(path: str | Path) -> SaliencyNet:
    buf = Path(path).read_bytes()
    if not buf.startswith(HEADER):
        raise ValueError(f"{path}: not a checkpoint (bad header)")
    end = buf.find(b"\nend\n", len(HEADER) - 1)
    if end < 0:
        raise ValueError(f"{path}: checkpoint index has no 'end' line")
    index = buf[len(HEADER):end].decode("utf-8").splitlines()
    data_start = end + len(b"\nend\n")
    config_lines, entries = [], []
    for line in index:
        kind, _, rest = line.partition(" ")
        if kind == "config":
            config_lines.append(rest)
        elif kind == "param":
            name, off, *dims = rest.split()
            entries.append((name, int(off), tuple(int(d) for d in dims)))
        else:
            raise ValueError(f"{path}: unexpected index line {line!r}")
    try:
        cfg = parse_config("\n".join(config_lines))
    except ConfigError as exc:
        raise ValueError(f"{path}: bad embedded config: {exc}") from None
    expected = SaliencyNet.param_shapes(cfg)
    params = {}
    for name, off, dims in entries:
        arr, _ = tensor_from_bytes(buf, data_start + off)
        if arr.shape != dims:
            raise ShapeError(f"{name}: index shape {dims} != stored shape {arr.shape}")
        if name in expected:
            if arr.size != int(np.prod(expected[name])):
                raise ShapeError(f"{name}: stored shape {arr.shape} != expected {expected[name]}")
            arr = arr.reshape(expected[name])
        params[name] = arr
    return SaliencyNet(cfg, params)

