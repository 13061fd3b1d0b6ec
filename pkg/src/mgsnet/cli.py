"""Command-line entry point: gen-data, train, infer, eval, offsets.

Exit status is 0 on success and 2 on any validation error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import geometry, netpbm
from .checkpoint import load_checkpoint, save_checkpoint
from .config import parse_config
from .geometry import CameraIntrinsics
from .metrics import METRIC_FIELDS, evaluate_dirs
from .net import infer, synth_dataset, train
from .tensor import write_tensor

log = logging.getLogger("mgsnet")


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        h, w = (int(p) for p in (parts * 2 if len(parts) == 1 else parts))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _intrinsics(text: str) -> CameraIntrinsics:
    try:
        return CameraIntrinsics.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def cmd_gen_data(args) -> None:
    h, w = args.size
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = synth_dataset(args.count, args.seed, h, w)
    for i in range(args.count):
        netpbm.save_image(data["rgb"][i], out / f"rgb_{i:04d}.ppm")
        netpbm.save_depth(data["depth"][i], out / f"depth_{i:04d}.pgm")
        netpbm.save_image(data["gt"][i], out / f"gt_{i:04d}.pgm")
    K = data["intrinsics"]
    (out / "intrinsics.txt").write_text(f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r}\n")
    log.info("wrote %d samples to %s", args.count, out)


def load_data_dir(path: str | Path) -> dict:
    root = Path(path)
    rgb_files = sorted(root.glob("rgb_*.ppm"))
    if not rgb_files:
        raise ValueError(f"no rgb_*.ppm files in {root}")
    rgb, depth, gt = [], [], []
    for f in rgb_files:
        idx = f.stem.split("_", 1)[1]
        rgb.append(netpbm.load_image(f)[0])
        gt_file = root / f"gt_{idx}.pgm"
        if not gt_file.exists():
            raise ValueError(f"missing ground truth {gt_file}")
        gt.append((netpbm.load_image(gt_file)[0] > 0.5).astype(np.float64))
        depth_file = root / f"depth_{idx}.pgm"
        if depth_file.exists():
            depth.append(netpbm.load_depth(depth_file)[0])
    if depth and len(depth) != len(rgb):
        raise ValueError("depth maps present for only some samples")
    kfile = root / "intrinsics.txt"
    h, w = rgb[0].shape[1:]
    K = CameraIntrinsics.parse(kfile.read_text()) if kfile.exists() else CameraIntrinsics.synthetic(h, w)
    return {
        "rgb": np.stack(rgb),
        "depth": np.stack(depth) if depth else None,
        "gt": np.stack(gt),
        "intrinsics": K,
    }


def cmd_train(args) -> None:
    cfg = parse_config(Path(args.config).read_text(encoding="utf-8"))
    data = load_data_dir(args.data)
    if data["rgb"].shape[2:] != cfg.size:
        raise ValueError(f"data size {data['rgb'].shape[2:]} != configured size {cfg.size}")
    result = train(cfg, data)
    save_checkpoint(args.out, result.net)
    if args.log:
        with open(args.log, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "loss"])
            for epoch, loss in enumerate(result.losses, start=1):
                writer.writerow([epoch, repr(float(loss))])
    if args.plot:
        from .plotting import loss_curve
        loss_curve(result.losses, args.plot)


def cmd_infer(args) -> None:
    net = load_checkpoint(args.ckpt)
    rgb = netpbm.load_image(args.rgb)
    if rgb.shape[1] != 3:
        raise ValueError(f"{args.rgb}: expected an RGB (P6) image")
    depth = netpbm.load_depth(args.depth) if args.depth else None
    h, w = rgb.shape[2:]
    K = args.intrinsics or CameraIntrinsics.synthetic(h, w)
    pred = infer(net, rgb, depth, K)
    netpbm.save_image(pred[0], args.out, bitdepth=8)


def cmd_eval(args) -> None:
    report = evaluate_dirs(args.pred, args.gt)
    Path(args.report).write_text(report.to_json(), encoding="utf-8")
    if args.per_pair:
        with open(args.per_pair, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["name", *METRIC_FIELDS])
            for name in sorted(report.per_pair):
                writer.writerow([name, *(repr(float(report.per_pair[name][k])) for k in METRIC_FIELDS)])
    if args.plot:
        from .plotting import metric_distribution
        metric_distribution(report.per_pair, args.plot)
    if report.warnings:
        log.warning("%d pair(s) skipped or excluded", report.warnings)


def cmd_offsets(args) -> None:
    depth = netpbm.load_depth(args.depth)
    off = geometry.geometric_offsets(depth, args.intrinsics, dilation=args.dilation,
                                     clamp=args.clamp)
    write_tensor(args.out, off)
    if args.csv:
        _, k2, h, w = off.shape
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["v", "u", "tap", "dy", "dx"])
            for v in range(h):
                for u in range(w):
                    for t in range(k2 // 2):
                        writer.writerow([v, u, t, repr(float(off[0, 2 * t, v, u])),
                                         repr(float(off[0, 2 * t + 1, v, u]))])
    if args.plot:
        from .plotting import sampling_positions
        sampling_positions(depth[0, 0], off[0], args.plot, dilation=args.dilation)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgsnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic RGB-D saliency dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_size, default=(64, 64))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the toy saliency network")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="CSV of per-epoch mean loss")
    p.add_argument("--plot", help="loss-curve figure")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict a saliency map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--depth")
    p.add_argument("--intrinsics", type=_intrinsics,
                   help="fx,fy,cx,cy (default: the synthetic camera)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score saliency maps against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--per-pair", help="CSV with one row of metrics per pair")
    p.add_argument("--plot", help="per-pair metric distribution figure")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("offsets", help="dump geometric offsets for a depth map")
    p.add_argument("--depth", required=True)
    p.add_argument("--intrinsics", type=_intrinsics, required=True)
    p.add_argument("--dilation", type=int, default=1)
    p.add_argument("--clamp", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--plot", help="sampling-position figure")
    p.set_defaults(func=cmd_offsets)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"mgsnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
