"""Offset generators: depth-driven geometric offsets and learned (3x3 conv) offsets.

The geometric generator is gradient-free. For every valid pixel it
back-projects to a 3-D point, fits a local plane to the neighbourhood,
lays a regular 3x3 grid of physical spacing ``dilation * Z / fx`` on that
plane and projects the grid back into the image. The offset of a tap is the
difference between the projected grid point and the regular image grid.
Fronto-parallel surfaces therefore produce exactly the regular grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import ConvParams, conv2d_backward, conv2d_forward
from .tensor import ShapeError, as_tensor

KERNEL = 3
N_OFFSET_CHANNELS = 2 * KERNEL * KERNEL


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for an image whose pixel u' maps to u = u' / factor."""
        return CameraIntrinsics(self.fx * factor, self.fy * factor,
                                self.cx * factor, self.cy * factor)

    @classmethod
    def parse(cls, text: str) -> "CameraIntrinsics":
        parts = text.replace(",", " ").split()
        if len(parts) != 4:
            raise ValueError(f"expected four numbers fx fy cx cy, got {text!r}")
        return cls(*(float(v) for v in parts))

    @classmethod
    def synthetic(cls, h: int, w: int) -> "CameraIntrinsics":
        return cls(64.0, 64.0, w / 2.0, h / 2.0)


def resample_depth(depth: np.ndarray, stride: int) -> np.ndarray:
    """Nearest resampling onto a stride-``stride`` feature grid.

    Feature pixel (v', u') takes the depth at (stride*v', stride*u'), the
    centre of the encoder receptive field; pair with ``K.scaled(1/stride)``.
    """
    depth = as_tensor(depth, "depth")
    return np.ascontiguousarray(depth[:, :, ::stride, ::stride])


def backproject(depth: np.ndarray, K: CameraIntrinsics):
    """Return (points (N,3,H,W), valid mask (N,1,H,W)); invalid points are 0."""
    depth = as_tensor(depth, "depth")
    if depth.shape[1] != 1:
        raise ShapeError(f"depth must have one channel, got {depth.shape[1]}")
    _, _, h, w = depth.shape
    mask = depth > 0.0
    z = np.where(mask, depth, 0.0)[:, 0]
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z], axis=1)
    return pts, mask


def fit_local_plane(points: np.ndarray, mask: np.ndarray, window: int = 3) -> np.ndarray:
    """Least-squares plane normal per pixel over the valid points in a window.

    Normals point along +z (toward positive depth). Fewer than three valid
    points, or a collinear neighbourhood, falls back to the view axis (0, 0, 1).
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    n, _, h, w = points.shape
    r = window // 2
    pp = np.pad(points, ((0, 0), (0, 0), (r, r), (r, r)))
    mp = np.pad(mask[:, 0], ((0, 0), (r, r), (r, r)))
    nbr = np.stack([pp[:, :, i:i + h, j:j + w]
                    for i in range(window) for j in range(window)], axis=1)
    nm = np.stack([mp[:, i:i + h, j:j + w]
                   for i in range(window) for j in range(window)], axis=1)
    cnt = nm.sum(axis=1)
    wts = nm[:, :, None].astype(np.float64)
    mean = (nbr * wts).sum(axis=1) / np.maximum(cnt, 1)[:, None]
    d = (nbr - mean[:, None]) * wts
    # (N, H, W, 3, 3) scatter matrices
    cov = np.einsum("nkahw,nkbhw->nhwab", d, d)
    evals, evecs = np.linalg.eigh(cov)
    normal = evecs[..., :, 0]
    flip = normal[..., 2] < 0
    normal[flip] *= -1.0
    scale = np.maximum(evals[..., 2], 1e-300)
    degenerate = (cnt < 3) | (evals[..., 1] <= 1e-12 * scale) | (evals[..., 2] <= 0)
    normal[degenerate] = (0.0, 0.0, 1.0)
    return np.ascontiguousarray(normal.transpose(0, 3, 1, 2))


def geometric_offsets(depth: np.ndarray, K: CameraIntrinsics, k: int = KERNEL,
                      dilation: int = 1, window: int = 3,
                      clamp: float | None = None) -> np.ndarray:
    """Offset field (N, 2*k*k, H, W) for a stride-1 deformable conv on the depth grid.

    ``depth`` must already live on the feature grid and ``K`` must be scaled
    to match. Invalid pixels get zero offsets. ``clamp`` bounds |dy|, |dx| and
    defaults to max(H, W).
    """
    if k != KERNEL:
        raise ValueError("only 3x3 kernels are supported")
    pts, mask = backproject(depth, K)
    normal = fit_local_plane(pts, mask, window)
    n, _, h, w = pts.shape
    bound = float(max(h, w) if clamp is None else clamp)

    # in-plane basis: e1 follows the image x-axis, e2 = normal x e1
    e1 = np.zeros_like(normal)
    e1[:, 0] = 1.0
    e1 -= normal[:, 0:1] * normal
    norm1 = np.linalg.norm(e1, axis=1, keepdims=True)
    alt = norm1[:, 0] < 1e-8
    ey = np.zeros_like(normal)
    ey[:, 1] = 1.0
    ey -= normal[:, 1:2] * normal
    normy = np.linalg.norm(ey, axis=1, keepdims=True)
    e1 = np.where(alt[:, None], ey, e1)
    norm1 = np.where(alt[:, None], normy, norm1)
    no_basis = norm1[:, 0] < 1e-8
    e1 = e1 / np.where(norm1 < 1e-8, 1.0, norm1)
    e2 = np.cross(normal, e1, axis=1)

    z = pts[:, 2]
    step = dilation * z / K.fx
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    usable = mask[:, 0] & ~no_basis

    off = np.zeros((n, 2 * k * k, h, w))
    for i in range(k):
        for j in range(k):
            b, a = i - k // 2, j - k // 2
            t = i * k + j
            if a == 0 and b == 0:
                continue
            q = pts + step[:, None] * (a * e1 + b * e2)
            front = usable & (q[:, 2] > 0.0)
            qz = np.where(front, q[:, 2], 1.0)
            qu = K.fx * q[:, 0] / qz + K.cx
            qv = K.fy * q[:, 1] / qz + K.cy
            dy = np.where(front, qv - (v + dilation * b), 0.0)
            dx = np.where(front, qu - (u + dilation * a), 0.0)
            off[:, 2 * t] = np.clip(dy, -bound, bound)
            off[:, 2 * t + 1] = np.clip(dx, -bound, bound)
    return off


def _check_eta(w_eta: ConvParams, k: int) -> None:
    if w_eta.out_channels != 2 * k * k:
        raise ShapeError(
            f"offset conv must have {2 * k * k} output channels, got {w_eta.out_channels}"
        )
    if w_eta.kernel_size != (3, 3):
        raise ShapeError(f"offset conv must be 3x3, got {w_eta.kernel_size}")


def learned_offsets(guidance: np.ndarray, w_eta: ConvParams, k: int = KERNEL) -> np.ndarray:
    _check_eta(w_eta, k)
    return conv2d_forward(guidance, w_eta)


def learned_offsets_backward(guidance: np.ndarray, w_eta: ConvParams, grad_off: np.ndarray,
                             k: int = KERNEL):
    """Returns (grad_guidance, grad_w, grad_b)."""
    _check_eta(w_eta, k)
    return conv2d_backward(guidance, w_eta, grad_off)
