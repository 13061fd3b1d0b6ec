"""Deformable 3x3 convolution: taps read at p + p_n + offset via bilinear sampling.

Offset fields have shape (N, 2*K, Ho, Wo) with channels laid out per tap as
[dy_0, dx_0, dy_1, dx_1, ...], taps in row-major kernel order. One field is
shared by every input and output channel.

Samples outside the feature plane read as zero. The sampling cell of a
coordinate q is [ceil(q) - 1, ceil(q)], so an integer coordinate sits on the
right edge of its cell: the value is still exact, and the derivative with
respect to the offset is the left-cell one-sided derivative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ops import ConvParams, _check_input, _check_grad_out, contract, contract_backward
from .tensor import ShapeError, as_tensor

# a deformable conv uses exactly the parameters of a standard conv
DeformConvParams = ConvParams


def bilinear_sample(plane: np.ndarray, qy: float, qx: float) -> float:
    """Sample a 2-D plane at real coordinates (qy, qx), zero outside."""
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    y0 = math.ceil(qy) - 1
    x0 = math.ceil(qx) - 1
    ly, lx = qy - y0, qx - x0
    hy, hx = 1.0 - ly, 1.0 - lx

    def at(y, x):
        return plane[y, x] if 0 <= y < h and 0 <= x < w else 0.0

    return float(hy * hx * at(y0, x0) + hy * lx * at(y0, x0 + 1)
                 + ly * hx * at(y0 + 1, x0) + ly * lx * at(y0 + 1, x0 + 1))


@dataclass
class _Sampling:
    """Everything the backward pass needs from one deformable gather."""

    cols: np.ndarray          # (C, K, N, Ho, Wo) sampled values
    idx: list                 # 4 x (K, N, Ho, Wo) flat indices into (N, H, W) (0 where invalid)
    wts: list                 # 4 x (K, N, Ho, Wo) bilinear weights (0 where invalid)
    vals: list                # 4 x (C, K, N, Ho, Wo) corner values (0 where invalid)
    ly: np.ndarray
    lx: np.ndarray


def _check_offsets(x: np.ndarray, p: ConvParams, off: np.ndarray) -> tuple[np.ndarray, int, int]:
    ho, wo = _check_input(x, p)
    kh, kw = p.kernel_size
    off = as_tensor(off, "offset field")
    expected = (x.shape[0], 2 * kh * kw, ho, wo)
    if off.shape != expected:
        raise ShapeError(
            f"offset field shape {off.shape} does not match expected {expected} "
            f"(2*{kh}*{kw} channels at the {ho}x{wo} output extent)"
        )
    return off, ho, wo


def _sample(x: np.ndarray, p: ConvParams, off: np.ndarray) -> _Sampling:
    off, ho, wo = _check_offsets(x, p, off)
    n, c, h, w = x.shape
    kh, kw = p.kernel_size
    k = kh * kw
    s, pad, d = p.stride, p.padding, p.dilation

    ti, tj = np.divmod(np.arange(k), kw)
    base_y = (np.arange(ho) * s - pad)[None, :, None] + (ti * d)[:, None, None]
    base_x = (np.arange(wo) * s - pad)[None, None, :] + (tj * d)[:, None, None]
    qy = base_y[:, None] + off[:, 0::2].transpose(1, 0, 2, 3)
    qx = base_x[:, None] + off[:, 1::2].transpose(1, 0, 2, 3)

    y0 = np.ceil(qy) - 1.0
    x0 = np.ceil(qx) - 1.0
    ly, lx = qy - y0, qx - x0
    hy, hx = 1.0 - ly, 1.0 - lx
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)

    xf = x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    plane = (np.arange(n) * (h * w))[None, :, None, None]
    idx, wts, vals = [], [], []
    for dy, dx, wgt in ((0, 0, hy * hx), (0, 1, hy * lx), (1, 0, ly * hx), (1, 1, ly * lx)):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        flat = np.where(valid, plane + yy * w + xx, 0)
        v = np.where(valid, xf[:, flat], 0.0)
        idx.append(flat)
        wts.append(np.where(valid, wgt, 0.0))
        vals.append(v)
    cols = wts[0] * vals[0] + wts[1] * vals[1] + wts[2] * vals[2] + wts[3] * vals[3]
    return _Sampling(cols, idx, wts, vals, ly, lx)


def deform_conv_forward(x: np.ndarray, p: ConvParams, off: np.ndarray,
                        return_cache: bool = False):
    x = as_tensor(x, "deform conv input")
    smp = _sample(x, p, off)
    y = contract(smp.cols, p.weight, p.bias)
    return (y, smp) if return_cache else y


def deform_conv_backward(x: np.ndarray, p: ConvParams, off: np.ndarray,
                         grad_out: np.ndarray, cache: _Sampling | None = None):
    """Gradients (grad_x, grad_w, grad_b, grad_off) of :func:`deform_conv_forward`."""
    x = as_tensor(x, "deform conv input")
    if cache is None:
        cache = _sample(x, p, off)
    n, c, h, w = x.shape
    ho, wo = cache.cols.shape[3:]
    grad_out = _check_grad_out(grad_out, (n, p.out_channels, ho, wo))
    grad_cols, grad_w, grad_b = contract_backward(cache.cols, p.weight, grad_out)

    plane_base = (np.arange(c) * (n * h * w)).reshape(c, 1, 1, 1, 1)
    gx = np.zeros(c * n * h * w)
    for flat, wgt in zip(cache.idx, cache.wts):
        target = plane_base + flat
        contrib = grad_cols * wgt
        gx += np.bincount(target.ravel(), weights=contrib.ravel(), minlength=gx.size)
    grad_x = np.ascontiguousarray(gx.reshape(c, n, h, w).transpose(1, 0, 2, 3))

    v00, v01, v10, v11 = cache.vals
    ly, lx = cache.ly, cache.lx
    dval_dy = (1.0 - lx) * (v10 - v00) + lx * (v11 - v01)
    dval_dx = (1.0 - ly) * (v01 - v00) + ly * (v11 - v10)
    k = cache.cols.shape[1]
    grad_off = np.empty((n, 2 * k, ho, wo))
    grad_off[:, 0::2] = (grad_cols * dval_dy).sum(axis=0).transpose(1, 0, 2, 3)
    grad_off[:, 1::2] = (grad_cols * dval_dx).sum(axis=0).transpose(1, 0, 2, 3)
    return grad_x, grad_w, grad_b, grad_off
