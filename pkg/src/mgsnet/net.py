"""Toy encoder-decoder saliency network hosting one MGS branch, plus its SGD trainer.

Layout for a 64x64 input with the default channel plan (16, 32, 64)::

    enc1  3x3 s2   3 -> 16    32x32
    enc2  3x3 s2  16 -> 32    16x16   f4
    enc3  3x3 s1  32 -> 64    16x16   f5
    MGS   32 -> 8 -> 8 -> 64  16x16   out = f5 + lam * f_M
    dec1  3x3 64 -> 16, up x2    32x32
    dec2  3x3 16 -> 8, up x2     64x64
    head  1x1  8 -> 1, sigmoid   64x64

Decoder stages convolve before upsampling so the 3x3 convs run at the
coarser grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry
from .geometry import CameraIntrinsics
from .mgs import MgsParams, mgs_backward, mgs_forward, residual_merge, residual_merge_backward
from .ops import (ConvParams, bce_loss, conv2d_backward, conv2d_forward, im2col, relu,
                  relu_backward, sigmoid, sigmoid_backward, upsample_bilinear,
                  upsample_bilinear_backward)
from .tensor import ShapeError, as_tensor

log = logging.getLogger(__name__)

STRIDE = 4  # total encoder downsampling; the MGS branch runs on this grid


@dataclass
class NetConfig:
    size: tuple[int, int] = (64, 64)
    channels: tuple[int, int, int] = (16, 32, 64)
    lam: float = 1.0
    generator: str = "geometric"
    seed: int = 0
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    batch: int = 8
    clamp: float | None = None

    def __post_init__(self):
        h, w = self.size
        if h % STRIDE or w % STRIDE or h <= 0 or w <= 0:
            raise ValueError(f"input size {h}x{w} must be positive and divisible by {STRIDE}")
        if len(self.channels) != 3 or min(self.channels) < 2:
            raise ValueError(f"channels must be three widths >= 2, got {self.channels}")
        if self.channels[2] % 8:
            raise ValueError(f"deepest width {self.channels[2]} must be divisible by 8")
        if self.generator not in ("geometric", "learned"):
            raise ValueError(f"generator must be 'geometric' or 'learned', got {self.generator!r}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.epochs < 0 or self.batch < 1:
            raise ValueError("epochs must be >= 0 and batch >= 1")

    @property
    def mid(self) -> int:
        return self.channels[2] // 8

    @property
    def decoder(self) -> tuple[int, int]:
        return self.channels[0], max(self.channels[0] // 2, 1)


@dataclass
class SynthSample:
    rgb: np.ndarray        # (3, H, W) in [0, 1]
    depth: np.ndarray      # (1, H, W) metres, > 0
    gt: np.ndarray         # (1, H, W) in {0, 1}
    intrinsics: CameraIntrinsics


def _plane_depth(normal, dist, u, v, K: CameraIntrinsics) -> np.ndarray:
    # depth of the plane {P : normal . P = dist} along each pixel ray
    ray_dot = normal[0] * (u - K.cx) / K.fx + normal[1] * (v - K.cy) / K.fy + normal[2]
    return dist / ray_dot


def _tilted_normal(rng: np.random.Generator, max_tilt: float) -> np.ndarray:
    tilt = rng.uniform(0.0, max_tilt)
    azim = rng.uniform(0.0, 2 * np.pi)
    return np.array([np.sin(tilt) * np.cos(azim), np.sin(tilt) * np.sin(azim), np.cos(tilt)])


def synth_sample(seed: int, h: int = 64, w: int = 64) -> SynthSample:
    """Deterministic RGB-D scene: textured background plane plus 1-3 slanted shapes.

    Shapes reuse the background palette, so they are hard to find from
    colour alone but stand out clearly in depth.
    """
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics.synthetic(h, w)
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)

    palette = rng.uniform(0.15, 0.85, size=(5, 3))
    bh, bw = max(h // 8, 1), max(w // 8, 1)
    blocks = rng.integers(0, len(palette), size=(bh, bw))
    bg_idx = np.repeat(np.repeat(blocks, -(-h // bh), axis=0), -(-w // bw), axis=1)[:h, :w]
    rgb = palette[bg_idx].transpose(2, 0, 1).copy()

    bg_normal = _tilted_normal(rng, np.deg2rad(10.0))
    bg_dist = rng.uniform(2.7, 3.3) * bg_normal[2]
    depth = _plane_depth(bg_normal, bg_dist, u, v, K)

    for _ in range(100):
        count = int(rng.integers(1, 4))
        shapes = []
        for _ in range(count):
            ch, cw = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
            rh, rw = rng.uniform(0.08, 0.25) * h, rng.uniform(0.08, 0.25) * w
            if rng.random() < 0.5:
                region = (np.abs(v - ch) <= rh) & (np.abs(u - cw) <= rw)
            else:
                region = ((v - ch) / rh) ** 2 + ((u - cw) / rw) ** 2 <= 1.0
            z0 = rng.uniform(1.0, 2.0)
            normal = _tilted_normal(rng, np.deg2rad(40.0))
            centre_ray = np.array([(cw - K.cx) / K.fx, (ch - K.cy) / K.fy, 1.0])
            dist = z0 * normal @ centre_ray
            color = palette[rng.integers(0, len(palette))]
            shapes.append((z0, region, normal, dist, color))
        gt = np.zeros((h, w), dtype=bool)
        for shape in shapes:
            gt |= shape[1]
        if 0.02 <= gt.mean() <= 0.60:
            break
    # far shapes first so nearer ones occlude them
    for z0, region, normal, dist, color in sorted(shapes, key=lambda s: -s[0]):
        depth = np.where(region, _plane_depth(normal, dist, u, v, K), depth)
        rgb[:, region] = color[:, None]
    rgb = np.clip(rgb + rng.normal(0.0, 0.04, size=rgb.shape), 0.0, 1.0)
    return SynthSample(rgb, depth[None], gt[None].astype(np.float64), K)


def synth_dataset(count: int, seed: int, h: int = 64, w: int = 64) -> dict[str, np.ndarray]:
    """Stack ``count`` samples with seeds derived from ``seed``."""
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(count)]
    samples = [synth_sample(s, h, w) for s in seeds]
    return {
        "rgb": np.stack([s.rgb for s in samples]),
        "depth": np.stack([s.depth for s in samples]),
        "gt": np.stack([s.gt for s in samples]),
        "intrinsics": samples[0].intrinsics,
    }


class SaliencyNet:
    """Parameters live in ``self.params`` (name -> array); layers hold views of them."""

    def __init__(self, config: NetConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = self.init_params(config) if params is None else params
        expected = self.param_shapes(config)
        if set(self.params) != set(expected):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ShapeError(f"parameter names mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.params[name].shape} != expected {shape}")

    @staticmethod
    def param_shapes(cfg: NetConfig) -> dict[str, tuple]:
        c0, c1, c2 = cfg.channels
        d0, d1 = cfg.decoder
        m = cfg.mid
        convs = {
            "enc1": (c0, 3, 3, 3),
            "enc2": (c1, c0, 3, 3),
            "enc3": (c2, c1, 3, 3),
            "mgs.down": (m, c1, 1, 1),
            "mgs.deform": (m, m, 3, 3),
            "mgs.up": (c2, m, 1, 1),
            "dec1": (d0, c2, 3, 3),
            "dec2": (d1, d0, 3, 3),
            "head": (1, d1, 1, 1),
        }
        if cfg.generator == "learned":
            convs["mgs.eta"] = (geometry.N_OFFSET_CHANNELS, 1, 3, 3)
        shapes = {}
        for name, wshape in convs.items():
            shapes[f"{name}.weight"] = wshape
            shapes[f"{name}.bias"] = (wshape[0],)
        return shapes

    @classmethod
    def init_params(cls, cfg: NetConfig) -> dict[str, np.ndarray]:
        """He-normal weights, zero biases, zero offset conv."""
        rng = np.random.default_rng(cfg.seed)
        params = {}
        for name, shape in cls.param_shapes(cfg).items():
            if name.startswith("mgs.eta") or name.endswith(".bias"):
                params[name] = np.zeros(shape)
            else:
                fan_in = shape[1] * shape[2] * shape[3]
                params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        return params

    def _conv(self, name: str, stride: int = 1) -> ConvParams:
        return ConvParams(self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride=stride)

    def mgs_params(self) -> MgsParams:
        cfg = self.config
        eta = self._conv("mgs.eta") if cfg.generator == "learned" else None
        return MgsParams(self._conv("mgs.down"), self._conv("mgs.deform"), self._conv("mgs.up"),
                         lam=cfg.lam, generator=cfg.generator, eta=eta, clamp=cfg.clamp)

    def offsets_for(self, depth: np.ndarray | None, K: CameraIntrinsics | None,
                    n: int) -> np.ndarray | None:
        """Geometric offsets on the feature grid, or None for the learned generator."""
        if self.config.generator != "geometric":
            return None
        h, w = self.config.size
        if depth is None:
            return np.zeros((n, geometry.N_OFFSET_CHANNELS, h // STRIDE, w // STRIDE))
        if K is None:
            K = CameraIntrinsics.synthetic(h, w)
        feat_depth = geometry.resample_depth(depth, STRIDE)
        return geometry.geometric_offsets(feat_depth, K.scaled(1.0 / STRIDE), clamp=self.config.clamp)

    def _guidance(self, depth: np.ndarray | None, n: int) -> np.ndarray:
        h, w = self.config.size
        if depth is None:
            return np.zeros((n, 1, h // STRIDE, w // STRIDE))
        return geometry.resample_depth(depth, STRIDE)

    def forward(self, rgb: np.ndarray, depth: np.ndarray | None = None,
                K: CameraIntrinsics | None = None, offsets: np.ndarray | None = None,
                use_branch: bool = True, return_cache: bool = False):
        """Saliency map (N, 1, H, W) in (0, 1).

        ``use_branch=False`` drops the MGS branch entirely (the RGB baseline).
        """
        rgb = as_tensor(rgb, "rgb")
        n = rgb.shape[0]
        if rgb.shape[1:] != (3, *self.config.size):
            raise ShapeError(f"rgb shape {rgb.shape[1:]} != expected {(3, *self.config.size)}")
        if depth is not None:
            depth = as_tensor(depth, "depth")
            if depth.shape != (n, 1, *self.config.size):
                raise ShapeError(f"depth shape {depth.shape} != expected {(n, 1, *self.config.size)}")
        c = {"rgb": rgb}
        enc1, enc2, enc3 = self._conv("enc1", 2), self._conv("enc2", 2), self._conv("enc3")
        c["cols1"] = im2col(rgb, enc1)
        c["z1"] = conv2d_forward(rgb, enc1, cols=c["cols1"])
        c["a1"] = relu(c["z1"])
        c["cols2"] = im2col(c["a1"], enc2)
        c["z2"] = conv2d_forward(c["a1"], enc2, cols=c["cols2"])
        f4 = c["a2"] = relu(c["z2"])
        c["cols3"] = im2col(f4, enc3)
        c["z3"] = conv2d_forward(f4, enc3, cols=c["cols3"])
        f5 = relu(c["z3"])

        if use_branch:
            mp = self.mgs_params()
            if mp.generator == "geometric":
                if offsets is None:
                    offsets = self.offsets_for(depth, K, n)
                guidance = None
            else:
                offsets = None
                guidance = self._guidance(depth, n)
            f_m, c["mgs"] = mgs_forward(f4, guidance, mp, offsets=offsets, return_cache=True)
            merged = residual_merge(f5, f_m, mp.lam)
        else:
            c["mgs"] = None
            merged = f5
        c["merged"] = merged

        dec1, dec2, head = self._conv("dec1"), self._conv("dec2"), self._conv("head")
        c["cols4"] = im2col(merged, dec1)
        c["z4"] = conv2d_forward(merged, dec1, cols=c["cols4"])
        c["u1"] = upsample_bilinear(relu(c["z4"]), 2)
        c["cols5"] = im2col(c["u1"], dec2)
        c["z5"] = conv2d_forward(c["u1"], dec2, cols=c["cols5"])
        c["u2"] = upsample_bilinear(relu(c["z5"]), 2)
        c["cols6"] = im2col(c["u2"], head)
        c["z6"] = conv2d_forward(c["u2"], head, cols=c["cols6"])
        pred = sigmoid(c["z6"])
        c["pred"] = pred
        return (pred, c) if return_cache else pred

    def backward(self, cache: dict, grad_pred: np.ndarray) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}

        def conv_back(name, x, cols_key, g, stride=1):
            gx, grads[f"{name}.weight"], grads[f"{name}.bias"] = conv2d_backward(
                x, self._conv(name, stride), g, cols=cache[cols_key])
            return gx

        g = sigmoid_backward(cache["pred"], grad_pred)
        g = conv_back("head", cache["u2"], "cols6", g)
        g = relu_backward(cache["z5"], upsample_bilinear_backward(g, 2))
        g = conv_back("dec2", cache["u1"], "cols5", g)
        g = relu_backward(cache["z4"], upsample_bilinear_backward(g, 2))
        g_merged = conv_back("dec1", cache["merged"], "cols4", g)

        if cache["mgs"] is not None:
            g_f5, g_fm = residual_merge_backward(g_merged, self.config.lam)
            bg = mgs_backward(cache["mgs"], g_fm)
            for key, val in bg.items():
                if key not in ("f4", "guidance"):
                    grads[f"mgs.{key}"] = val
            g_f4_branch = bg["f4"]
        else:
            g_f5, g_f4_branch = g_merged, None
        g = relu_backward(cache["z3"], g_f5)
        g_f4 = conv_back("enc3", cache["a2"], "cols3", g)
        if g_f4_branch is not None:
            g_f4 = g_f4 + g_f4_branch
        g = relu_backward(cache["z2"], g_f4)
        g = conv_back("enc2", cache["a1"], "cols2", g, stride=2)
        g = relu_backward(cache["z1"], g)
        conv_back("enc1", cache["rgb"], "cols1", g, stride=2)
        for name in self.params:
            grads.setdefault(name, np.zeros_like(self.params[name]))
        return grads


@dataclass
class TrainResult:
    net: SaliencyNet
    losses: list[float] = field(default_factory=list)


class DivergenceError(FloatingPointError):
    pass


def train(config: NetConfig, dataset: dict[str, np.ndarray],
          net: SaliencyNet | None = None) -> TrainResult:
    """Mini-batch SGD with momentum on mean BCE.

    ``dataset`` holds stacked ``rgb``, ``depth``, ``gt`` arrays and one
    ``intrinsics``. Returns the trained net and the mean loss of each epoch.
    """
    rgb, depth, gt = dataset["rgb"], dataset.get("depth"), dataset["gt"]
    if len(rgb) == 0:
        raise ValueError("training dataset is empty")
    net = SaliencyNet(config) if net is None else net
    # geometric offsets are constants of the data: compute once
    offsets = net.offsets_for(depth, dataset.get("intrinsics"), len(rgb))
    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    rng = np.random.default_rng(config.seed)
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(rgb))
        total = 0.0
        for start in range(0, len(order), config.batch):
            idx = np.sort(order[start:start + config.batch])
            d = None if depth is None else depth[idx]
            off = None if offsets is None else offsets[idx]
            pred, cache = net.forward(rgb[idx], d, offsets=off, return_cache=True)
            loss, g = bce_loss(pred, gt[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"loss became {loss} at epoch {epoch + 1}")
            grads = net.backward(cache, g)
            for name, p in net.params.items():
                v = velocity[name]
                v *= config.momentum
                v += grads[name]
                p -= config.lr * v
            total += loss * len(idx)
        mean_loss = total / len(rgb)
        if not np.isfinite(mean_loss):
            raise DivergenceError(f"epoch {epoch + 1} mean loss is {mean_loss}")
        losses.append(float(mean_loss))
        log.info("epoch %d loss %.6f", epoch + 1, mean_loss)
    return TrainResult(net, losses)


def infer(net: SaliencyNet, rgb: np.ndarray, depth: np.ndarray | None = None,
          K: CameraIntrinsics | None = None) -> np.ndarray:
    """Forward pass only; without depth the geometric generator yields zero offsets."""
    return net.forward(rgb, depth, K)


def predict_dataset(net: SaliencyNet, dataset: dict[str, np.ndarray], batch: int = 16) -> np.ndarray:
    rgb, depth = dataset["rgb"], dataset.get("depth")
    K = dataset.get("intrinsics")
    out = []
    for s in range(0, len(rgb), batch):
        d = None if depth is None else depth[s:s + batch]
        out.append(net.forward(rgb[s:s + batch], d, K))
    return np.concatenate(out)


def with_overrides(config: NetConfig, **kw) -> NetConfig:
    return replace(config, **kw)
