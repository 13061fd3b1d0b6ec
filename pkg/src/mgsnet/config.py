"""Flat ``key = value`` run configuration.

Recognised keys and defaults::

    size      = 64x64       input H x W (both divisible by 4)
    epochs    = 20
    lr        = 0.05
    momentum  = 0.9
    batch     = 8
    lambda    = 1.0         residual weight of the MGS branch
    generator = geometric   geometric | learned
    seed      = 0
    channels  = 16,32,64    encoder widths
    clamp     = none        offset bound in pixels (none = max feature extent)
"""

from __future__ import annotations

from dataclasses import fields

from .net import NetConfig

GENERATORS = ("geometric", "learned")


class ConfigError(ValueError):
    pass


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise ValueError(f"expected HxW, got {text!r}")
    return int(parts[0]), int(parts[1])


def _channels(text: str) -> tuple[int, int, int]:
    vals = tuple(int(v) for v in text.split(","))
    if len(vals) != 3:
        raise ValueError(f"expected three comma-separated widths, got {text!r}")
    return vals


def _generator(text: str) -> str:
    if text not in GENERATORS:
        raise ValueError(f"unknown generator {text!r}; valid: {', '.join(GENERATORS)}")
    return text


def _clamp(text: str) -> float | None:
    if text.lower() == "none":
        return None
    val = float(text)
    if val <= 0:
        raise ValueError("clamp must be positive")
    return val


# key -> (NetConfig field, parser)
KEYS = {
    "size": ("size", _size),
    "epochs": ("epochs", int),
    "lr": ("lr", float),
    "momentum": ("momentum", float),
    "batch": ("batch", int),
    "lambda": ("lam", float),
    "generator": ("generator", _generator),
    "seed": ("seed", int),
    "channels": ("channels", _channels),
    "clamp": ("clamp", _clamp),
}


def parse_config(text: str, base: NetConfig | None = None) -> NetConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(
                f"line {lineno}: unknown key {key!r}; valid keys: {', '.join(KEYS)}"
            )
        attr, parse = KEYS[key]
        try:
            values[attr] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    base = base or NetConfig()
    merged = {f.name: getattr(base, f.name) for f in fields(NetConfig)}
    merged.update(values)
    try:
        return NetConfig(**merged)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def format_config(cfg: NetConfig) -> str:
    h, w = cfg.size
    lines = [
        f"size = {h}x{w}",
        f"epochs = {cfg.epochs}",
        f"lr = {cfg.lr!r}",
        f"momentum = {cfg.momentum!r}",
        f"batch = {cfg.batch}",
        f"lambda = {cfg.lam!r}",
        f"generator = {cfg.generator}",
        f"seed = {cfg.seed}",
        f"channels = {','.join(str(c) for c in cfg.channels)}",
        f"clamp = {'none' if cfg.clamp is None else repr(cfg.clamp)}",
    ]
    return "\n".join(lines) + "\n"
