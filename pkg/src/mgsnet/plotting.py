"""Figures written next to the CLI's delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
})

# PNG metadata carries no timestamp, keeping repeated runs byte-identical
_META = {"Software": None}


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, metadata=_META if str(path).endswith(".png") else None)
    plt.close(fig)


def loss_curve(losses, path: str | Path, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(4.0, 2.8))
    epochs = np.arange(1, len(losses) + 1)
    ax.plot(epochs, losses, marker="o", ms=3, lw=1.2, color="C0")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean BCE")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    _save(fig, path)


def sampling_positions(depth: np.ndarray, offsets: np.ndarray, path: str | Path,
                       every: int | None = None, dilation: int = 1) -> None:
    """Depth map with regular (grey) and deformed (red) 3x3 sampling grids.

    ``depth`` is (H, W) and ``offsets`` (18, H, W) on the same grid.
    """
    h, w = depth.shape
    every = every or max(min(h, w) // 6, 3)
    fig, ax = plt.subplots(figsize=(4.5, 4.5 * h / w))
    im = ax.imshow(depth, cmap="viridis")
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="depth [m]")
    taps = [(i - 1, j - 1) for i in range(3) for j in range(3)]
    for v in range(every // 2, h, every):
        for u in range(every // 2, w, every):
            reg = np.array([(v + dilation * a, u + dilation * b) for a, b in taps], dtype=float)
            dyx = np.stack([offsets[0::2, v, u], offsets[1::2, v, u]], axis=1)
            ax.scatter(reg[:, 1], reg[:, 0], s=4, c="0.85", linewidths=0)
            ax.scatter(reg[:, 1] + dyx[:, 1], reg[:, 0] + dyx[:, 0], s=5, c="C3", linewidths=0)
    ax.set_xlim(-0.5, w - 0.5)
    ax.set_ylim(h - 0.5, -0.5)
    ax.set_title("depth-guided sampling positions")
    _save(fig, path)


def metric_distribution(per_pair: dict[str, dict[str, float]], path: str | Path) -> None:
    """Box plot of each metric over the evaluated pairs."""
    names = ["mae", "f_max", "f_mean", "f_w", "s_measure", "e_measure"]
    data = [[m[k] for m in per_pair.values()] for k in names]
    fig, ax = plt.subplots(figsize=(5.0, 2.8))
    ax.boxplot(data, showmeans=True)
    ax.set_xticks(range(1, len(names) + 1), names)
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(f"per-pair metrics (n={len(per_pair)})")
    ax.grid(axis="y", alpha=0.3)
    _save(fig, path)
