"""Standard neural operators with explicit forward and backward passes.

Convolutions go through a shared im2col layout of shape (C, K, N, Ho, Wo),
K = kh * kw in row-major tap order, contracted by a single matmul. The
deformable convolution reuses :func:`contract`, which is what makes its
zero-offset case bit-identical to :func:`conv2d_forward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, as_tensor

BCE_EPS = 1e-7
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


@dataclass
class ConvParams:
    """Weights (outC, inC, kh, kw), bias (outC,), stride, zero padding, dilation.

    ``padding=None`` picks ``dilation * (k // 2)``, i.e. "same" output size at
    stride 1 (pad = dilation for 3x3, 0 for 1x1).
    """

    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int | None = None
    dilation: int = 1

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be 4-D, got shape {self.weight.shape}")
        out_c, _, kh, kw = self.weight.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
        if self.bias is None:
            self.bias = np.zeros(out_c)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.bias.shape != (out_c,):
            raise ShapeError(f"bias length {self.bias.size} != outC {out_c}")
        if self.stride < 1 or self.dilation < 1:
            raise ValueError("stride and dilation must be >= 1")
        if self.padding is None:
            self.padding = self.dilation * (kh // 2)
        if self.padding < 0:
            raise ValueError("padding must be >= 0")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel_size
        ho = (h + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
        wo = (w + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        return ho, wo


def _check_input(x: np.ndarray, p: ConvParams) -> tuple[int, int]:
    if x.shape[1] != p.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels but weights expect {p.in_channels}"
        )
    ho, wo = p.output_size(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        kh, kw = p.kernel_size
        raise ShapeError(
            f"padded input {x.shape[2] + 2 * p.padding}x{x.shape[3] + 2 * p.padding} "
            f"smaller than effective kernel extent "
            f"{p.dilation * (kh - 1) + 1}x{p.dilation * (kw - 1) + 1}"
        )
    return ho, wo


def im2col(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Gather regular-grid samples into (C, K, N, Ho, Wo) with zero padding."""
    ho, wo = _check_input(x, p)
    kh, kw = p.kernel_size
    n, c = x.shape[:2]
    pad, s, d = p.padding, p.stride, p.dilation
    xp = x.transpose(1, 0, 2, 3)
    if pad:
        xp = np.pad(xp, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, kh * kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * d, j * d
            cols[:, i * kw + j] = xp[:, :, y0 : y0 + s * (ho - 1) + 1 : s,
                                     x0 : x0 + s * (wo - 1) + 1 : s]
    return cols


def _as_matrix(cols: np.ndarray) -> np.ndarray:
    # BLAS picks its summation order from the operand layout; one fixed layout
    # keeps standard and deformable convolutions bit-identical
    c, k, n, ho, wo = cols.shape
    return np.ascontiguousarray(cols).reshape(c * k, n * ho * wo)


def contract(cols: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    c, k, n, ho, wo = cols.shape
    out_c = weight.shape[0]
    y = weight.reshape(out_c, c * k) @ _as_matrix(cols)
    y += bias[:, None]
    return np.ascontiguousarray(y.reshape(out_c, n, ho, wo).transpose(1, 0, 2, 3))


def contract_backward(cols: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    """Return (grad_cols, grad_w, grad_b) for :func:`contract`."""
    c, k, n, ho, wo = cols.shape
    out_c = weight.shape[0]
    g = grad_out.transpose(1, 0, 2, 3).reshape(out_c, n * ho * wo)
    grad_w = (g @ _as_matrix(cols).T).reshape(weight.shape)
    grad_b = g.sum(axis=1)
    grad_cols = (weight.reshape(out_c, c * k).T @ g).reshape(cols.shape)
    return grad_cols, grad_w, grad_b


def conv2d_forward(x: np.ndarray, p: ConvParams, cols: np.ndarray | None = None) -> np.ndarray:
    x = as_tensor(x, "conv2d input")
    if cols is None:
        cols = im2col(x, p)
    return contract(cols, p.weight, p.bias)


def _check_grad_out(grad_out: np.ndarray, expected: tuple) -> np.ndarray:
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != output shape {expected}")
    return grad_out


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray,
                    cols: np.ndarray | None = None):
    """Gradients (grad_x, grad_w, grad_b) of :func:`conv2d_forward`."""
    x = as_tensor(x, "conv2d input")
    ho, wo = _check_input(x, p)
    grad_out = _check_grad_out(grad_out, (x.shape[0], p.out_channels, ho, wo))
    if cols is None:
        cols = im2col(x, p)
    grad_cols, grad_w, grad_b = contract_backward(cols, p.weight, grad_out)

    n, c, h, w = x.shape
    kh, kw = p.kernel_size
    pad, s, d = p.padding, p.stride, p.dilation
    gp = np.zeros((c, n, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * d, j * d
            gp[:, :, y0 : y0 + s * (ho - 1) + 1 : s,
               x0 : x0 + s * (wo - 1) + 1 : s] += grad_cols[:, i * kw + j]
    grad_x = gp[:, :, pad : pad + h, pad : pad + w].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """``x`` is the pre-activation input."""
    return np.where(x > 0.0, grad_out, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # clipped so the result stays strictly inside (0, 1) in float64
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _SIG_LO, _SIG_HI)


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """``y`` is the sigmoid output."""
    return grad_out * y * (1.0 - y)


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}; expected 'relu' or 'sigmoid'")


def activation_backward(x: np.ndarray, y: np.ndarray, grad_out: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return relu_backward(x, grad_out)
    if kind == "sigmoid":
        return sigmoid_backward(y, grad_out)
    raise ValueError(f"unknown activation {kind!r}; expected 'relu' or 'sigmoid'")


def bce_loss(pred: np.ndarray, target: np.ndarray, eps: float = BCE_EPS):
    """Mean binary cross-entropy and its gradient w.r.t. ``pred``.

    ``pred`` is clamped to [eps, 1 - eps]; the gradient is that of the clamped
    expression, so it is zero where the clamp is active.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    if target.size and (target.min() < 0.0 or target.max() > 1.0):
        raise ValueError("BCE target values must lie in [0, 1]")
    p = np.clip(pred, eps, 1.0 - eps)
    loss = -np.mean(target * np.log(p) + (1.0 - target) * np.log1p(-p))
    if not np.isfinite(loss):
        raise FloatingPointError("BCE loss is not finite")
    inside = (pred >= eps) & (pred <= 1.0 - eps)
    grad = np.where(inside, (p - target) / (p * (1.0 - p)), 0.0) / pred.size
    return float(loss), grad


def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    """Row i holds the align-corners-false bilinear weights of output i."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.floor(src).astype(int)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def upsample_bilinear(x: np.ndarray, factor: int) -> np.ndarray:
    x = as_tensor(x, "upsample input")
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    my = _interp_matrix(x.shape[2], factor)
    mx = _interp_matrix(x.shape[3], factor)
    return my @ x @ mx.T


def upsample_bilinear_backward(grad_out: np.ndarray, factor: int) -> np.ndarray:
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if factor == 1:
        return grad_out.copy()
    h, w = grad_out.shape[2] // factor, grad_out.shape[3] // factor
    my = _interp_matrix(h, factor)
    mx = _interp_matrix(w, factor)
    return my.T @ grad_out @ mx
