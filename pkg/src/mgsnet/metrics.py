"""Salient-object-detection metrics: MAE, F-measure (max / adaptive / weighted),
S-measure and E-measure, plus directory-level aggregation.

Saliency maps are 2-D float arrays in [0, 1]; ground truths are binarised at
0.5. Every metric except MAE needs at least one foreground pixel in the
ground truth; otherwise :class:`DegenerateGroundTruth` is raised and
:func:`evaluate_dirs` excludes the pair.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

BETA2 = 0.3
ALPHA = 0.5
EPS = np.spacing(1.0)
THRESHOLDS = np.arange(256) / 255.0


class DegenerateGroundTruth(ValueError):
    """Ground truth without foreground pixels."""


class EvaluationError(ValueError):
    pass


def _prepare(S, G, need_fg: bool = True) -> tuple[np.ndarray, np.ndarray]:
    S = np.asarray(S, dtype=np.float64)
    G = np.asarray(G)
    S = np.squeeze(S) if S.ndim > 2 else S
    G = np.squeeze(G) if G.ndim > 2 else G
    if S.shape != G.shape:
        raise ValueError(f"saliency map shape {S.shape} != ground truth shape {G.shape}")
    G = G > 0.5
    if need_fg and not G.any():
        raise DegenerateGroundTruth("ground truth has no foreground pixels")
    return S, G


def mae(S, G) -> float:
    S = np.asarray(S, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if S.shape != G.shape:
        raise ValueError(f"saliency map shape {S.shape} != ground truth shape {G.shape}")
    return float(np.mean(np.abs(S - G)))


def f_beta(precision, recall, beta2: float = BETA2):
    """(1 + b2) P R / (b2 P + R), zero where the denominator vanishes."""
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    num = (1.0 + beta2) * precision * recall
    den = beta2 * precision + recall
    out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def adaptive_threshold(S) -> float:
    return min(2.0 * float(np.mean(S)), 1.0)


def _f_from_counts(tp, fp, n_fg):
    tp = np.asarray(tp, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    pos = tp + fp
    precision = np.where(pos > 0, tp / np.where(pos > 0, pos, 1.0), 0.0)
    recall = tp / n_fg
    return f_beta(precision, recall)


def f_curve(S, G) -> np.ndarray:
    """F_beta of ``S >= i/255`` for i = 0..255."""
    S, G = _prepare(S, G)
    level = np.searchsorted(THRESHOLDS, S.ravel(), side="right") - 1
    g = G.ravel()
    fg_hist = np.bincount(level[g], minlength=256)
    bg_hist = np.bincount(level[~g], minlength=256)
    # pixels at or above threshold i
    tp = np.cumsum(fg_hist[::-1])[::-1]
    fp = np.cumsum(bg_hist[::-1])[::-1]
    return _f_from_counts(tp, fp, g.sum())


def f_measures(S, G) -> tuple[float, float]:
    """(max F over the 256 thresholds, F at the adaptive threshold)."""
    curve = f_curve(S, G)
    S, G = _prepare(S, G)
    binary = S >= adaptive_threshold(S)
    tp = np.count_nonzero(binary & G)
    fp = np.count_nonzero(binary & ~G)
    return float(curve.max()), float(_f_from_counts(tp, fp, G.sum()))


def _nearest_foreground(G: np.ndarray, chunk: int = 4096):
    """Euclidean distance to, and flat index of, the nearest foreground pixel.

    Ties go to the first foreground pixel in row-major order.
    """
    h, w = G.shape
    fg = np.flatnonzero(G)
    fy, fx = np.divmod(fg, w)
    yy, xx = np.divmod(np.arange(h * w), w)
    nearest = np.empty(h * w, dtype=np.int64)
    dist2 = np.empty(h * w, dtype=np.int64)
    for s in range(0, h * w, chunk):
        dy = yy[s:s + chunk, None] - fy[None]
        dx = xx[s:s + chunk, None] - fx[None]
        d2 = dy * dy + dx * dx
        arg = np.argmin(d2, axis=1)
        nearest[s:s + chunk] = fg[arg]
        dist2[s:s + chunk] = d2[np.arange(len(arg)), arg]
    return np.sqrt(dist2).reshape(h, w), nearest.reshape(h, w)


def gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = size // 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return k / k.sum()


def weighted_f(S, G) -> float:
    """Weighted F-measure with dependency-corrected, distance-weighted errors."""
    S, G = _prepare(S, G)
    E = np.abs(S - G)
    dist, nearest = _nearest_foreground(G)
    # background errors inherit the error of their nearest foreground pixel
    Et = np.where(G, E, E.ravel()[nearest])
    EA = ndimage.correlate(Et, gaussian_kernel(), mode="constant", cval=0.0)
    min_e = np.where(G & (EA < E), EA, E)
    B = np.where(G, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    Ew = min_e * B
    tpw = G.sum() - Ew[G].sum()
    fpw = Ew[~G].sum()
    recall = 1.0 - Ew[G].mean()
    precision = tpw / (tpw + fpw + EPS)
    return float((1.0 + BETA2) * recall * precision / (recall + BETA2 * precision + EPS))


def _object_score(x: np.ndarray) -> float:
    mu = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma + EPS)


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    x, y = pred.mean(), gt.mean()
    dof = max(n - 1, 1)
    sx = ((pred - x) ** 2).sum() / dof
    sy = ((gt - y) ** 2).sum() / dof
    sxy = ((pred - x) * (gt - y)).sum() / dof
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def s_measure(S, G) -> float:
    """Structure measure, 0.5 * object-aware + 0.5 * region-aware, clamped to [0, 1]."""
    S, G = _prepare(S, G)
    y = G.mean()
    if y == 1.0:
        return float(np.clip(S.mean(), 0.0, 1.0))
    Gf = G.astype(np.float64)
    obj = (y * _object_score(S[G]) + (1.0 - y) * _object_score(1.0 - S[~G]))

    h, w = G.shape
    cy, cx = np.argwhere(G).mean(axis=0).round()
    cx, cy = int(cx) + 1, int(cy) + 1
    area = h * w
    region = 0.0
    for rows, cols in (((0, cy), (0, cx)), ((0, cy), (cx, w)),
                       ((cy, h), (0, cx)), ((cy, h), (cx, w))):
        size = (rows[1] - rows[0]) * (cols[1] - cols[0])
        if size == 0:
            continue
        block = (slice(*rows), slice(*cols))
        region += size / area * _ssim(S[block], Gf[block])
    score = ALPHA * obj + (1.0 - ALPHA) * region
    return float(np.clip(score, 0.0, 1.0))


def e_measure(S, G) -> float:
    """Enhanced-alignment measure of ``S`` binarised at the adaptive threshold."""
    S, G = _prepare(S, G)
    Sb = (S >= adaptive_threshold(S)).astype(np.float64)
    Gf = G.astype(np.float64)
    if G.all():
        enhanced = Sb
    else:
        phi_s = Sb - Sb.mean()
        phi_g = Gf - Gf.mean()
        align = 2.0 * phi_s * phi_g / (phi_s * phi_s + phi_g * phi_g + EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


METRIC_FIELDS = ("mae", "f_max", "f_mean", "f_w", "s_measure", "e_measure")


def evaluate_pair(S, G) -> dict[str, float]:
    f_max, f_mean = f_measures(S, G)
    return {
        "mae": mae(np.squeeze(S), np.squeeze(np.asarray(G) > 0.5).astype(np.float64)),
        "f_max": f_max,
        "f_mean": f_mean,
        "f_w": weighted_f(S, G),
        "s_measure": s_measure(S, G),
        "e_measure": e_measure(S, G),
    }


@dataclass
class MetricsReport:
    mae: float
    f_max: float
    f_mean: float
    f_w: float
    s_measure: float
    e_measure: float
    pairs: int
    degenerate: int = 0
    unmatched: list[str] = field(default_factory=list)
    per_pair: dict[str, dict[str, float]] = field(default_factory=dict, repr=False)

    @property
    def warnings(self) -> int:
        return self.degenerate + len(self.unmatched)

    def to_json(self) -> str:
        doc = {k: getattr(self, k) for k in METRIC_FIELDS}
        doc["pairs"] = self.pairs
        doc["degenerate"] = self.degenerate
        doc["unmatched"] = self.unmatched
        return json.dumps(doc, indent=2) + "\n"


def aggregate(per_pair: dict[str, dict[str, float]], degenerate: int = 0,
              unmatched: list[str] | None = None) -> MetricsReport:
    if not per_pair:
        raise EvaluationError("no evaluable pairs")
    names = sorted(per_pair)
    means = {k: float(np.mean([per_pair[n][k] for n in names])) for k in METRIC_FIELDS}
    return MetricsReport(**means, pairs=len(names), degenerate=degenerate,
                         unmatched=list(unmatched or []), per_pair=per_pair)


def evaluate_dirs(pred_dir: str | Path, gt_dir: str | Path) -> MetricsReport:
    """Average per-pair metrics over files with matching stems in two directories."""
    from .netpbm import load_image

    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds = {p.stem: p for p in sorted(pred_dir.glob("*.p[gp]m"))}
    gts = {p.stem: p for p in sorted(gt_dir.glob("*.p[gp]m"))}
    common = sorted(set(preds) & set(gts))
    unmatched = sorted(set(preds) ^ set(gts))
    for stem in unmatched:
        log.warning("no counterpart for %s; skipped", stem)
    if not common:
        raise EvaluationError(
            f"no matching file stems between {pred_dir} and {gt_dir}"
            + (f" (unmatched: {', '.join(unmatched)})" if unmatched else "")
        )
    per_pair, degenerate = {}, 0
    for stem in common:
        S = load_image(preds[stem])[0].mean(axis=0)
        G = load_image(gts[stem])[0].mean(axis=0)
        try:
            per_pair[stem] = evaluate_pair(S, G)
        except DegenerateGroundTruth:
            log.warning("%s: ground truth has no foreground; excluded", stem)
            degenerate += 1
    return aggregate(per_pair, degenerate, unmatched)
