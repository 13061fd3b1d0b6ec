"""The modality-guided residual branch: 1x1 reduce -> guided deformable 3x3 -> 1x1 expand."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .deform import deform_conv_backward, deform_conv_forward
from .ops import ConvParams, conv2d_backward, conv2d_forward, im2col, relu, relu_backward
from .tensor import ShapeError, as_tensor

GENERATORS = ("geometric", "learned")


@dataclass
class MgsParams:
    down: ConvParams
    deform: ConvParams
    up: ConvParams
    lam: float = 1.0
    generator: str = "geometric"
    eta: ConvParams | None = None
    clamp: float | None = None

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"generator must be one of {GENERATORS}, got {self.generator!r}")
        mid = self.down.out_channels
        if not (self.deform.in_channels == self.deform.out_channels == self.up.in_channels == mid):
            raise ShapeError(
                f"bottleneck widths disagree: down->{mid}, deform "
                f"{self.deform.in_channels}->{self.deform.out_channels}, up {self.up.in_channels}->"
            )
        if self.deform.kernel_size != (3, 3):
            raise ShapeError("the deformable conv must be 3x3")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.generator == "learned" and self.eta is None:
            raise ValueError("learned generator needs eta parameters")

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in ("down", "deform", "up", "eta"):
            conv = getattr(self, name)
            if conv is not None:
                out[f"{name}.weight"] = conv.weight
                out[f"{name}.bias"] = conv.bias
        return out


@dataclass
class MgsCache:
    f4: np.ndarray
    guidance: np.ndarray | None
    offsets: np.ndarray
    params: MgsParams
    cols_down: np.ndarray
    z_down: np.ndarray
    a_down: np.ndarray
    deform_cache: object
    z_deform: np.ndarray
    a_deform: np.ndarray
    cols_up: np.ndarray = field(repr=False)


def compute_offsets(a_down: np.ndarray, guidance, params: MgsParams,
                    K: geometry.CameraIntrinsics | None) -> np.ndarray:
    """Offsets for the deformable conv whose input is ``a_down``."""
    ho, wo = params.deform.output_size(*a_down.shape[2:])
    n = a_down.shape[0]
    if params.generator == "geometric":
        if guidance is None:
            # no depth: the zero-offset fallback
            return np.zeros((n, geometry.N_OFFSET_CHANNELS, ho, wo))
        if K is None:
            raise ValueError("geometric generator needs camera intrinsics")
        if params.deform.stride != 1:
            raise ShapeError("geometric offsets need a stride-1 deformable conv")
        off = geometry.geometric_offsets(guidance, K, dilation=params.deform.dilation,
                                         clamp=params.clamp)
    else:
        off = geometry.learned_offsets(guidance, params.eta)
    if off.shape[0] != n or off.shape[2:] != (ho, wo):
        raise ShapeError(
            f"guidance-derived offsets {off.shape[2:]} do not match the reduced "
            f"feature map {(ho, wo)}"
        )
    return off


def mgs_forward(f4: np.ndarray, guidance, params: MgsParams,
                K: geometry.CameraIntrinsics | None = None,
                offsets: np.ndarray | None = None, return_cache: bool = False):
    """Modality-guided feature f_M = up(deform(down(f4), offsets(guidance))).

    ``guidance`` is a depth map on the feature grid (geometric generator) or a
    guidance feature tensor (learned generator). Precomputed geometric
    ``offsets`` may be passed instead of depth.
    """
    f4 = as_tensor(f4, "f4")
    cols_down = im2col(f4, params.down)
    z_down = conv2d_forward(f4, params.down, cols=cols_down)
    a_down = relu(z_down)
    if offsets is None:
        offsets = compute_offsets(a_down, guidance, params, K)
    z_def, dcache = deform_conv_forward(a_down, params.deform, offsets, return_cache=True)
    a_def = relu(z_def)
    cols_up = im2col(a_def, params.up)
    f_m = conv2d_forward(a_def, params.up, cols=cols_up)
    if not return_cache:
        return f_m
    cache = MgsCache(f4, guidance, offsets, params, cols_down, z_down, a_down,
                     dcache, z_def, a_def, cols_up)
    return f_m, cache


def residual_merge(f5: np.ndarray, f_m: np.ndarray, lam: float) -> np.ndarray:
    if f5.shape != f_m.shape:
        raise ShapeError(f"cannot merge f5 {f5.shape} with branch output {f_m.shape}")
    return f5 + lam * f_m


def residual_merge_backward(grad_out: np.ndarray, lam: float):
    """Returns (grad_f5, grad_f_m)."""
    return grad_out, lam * grad_out


def mgs_backward(cache: MgsCache | None, grad_fm: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of every branch tensor plus ``f4`` (and ``guidance`` when learned).

    Keys match :meth:`MgsParams.tensors`; ``lam`` is not trained.
    """
    if cache is None:
        raise ValueError("mgs_backward needs the cache returned by mgs_forward(return_cache=True)")
    p = cache.params
    grads: dict[str, np.ndarray] = {}
    g_adef, grads["up.weight"], grads["up.bias"] = conv2d_backward(
        cache.a_deform, p.up, grad_fm, cols=cache.cols_up)
    g_zdef = relu_backward(cache.z_deform, g_adef)
    g_adown, grads["deform.weight"], grads["deform.bias"], g_off = deform_conv_backward(
        cache.a_down, p.deform, cache.offsets, g_zdef, cache=cache.deform_cache)
    g_zdown = relu_backward(cache.z_down, g_adown)
    grads["f4"], grads["down.weight"], grads["down.bias"] = conv2d_backward(
        cache.f4, p.down, g_zdown, cols=cache.cols_down)
    if p.generator == "learned":
        grads["guidance"], grads["eta.weight"], grads["eta.bias"] = \
            geometry.learned_offsets_backward(cache.guidance, p.eta, g_off)
    return grads
