"""Command line front end.

Subcommands: run (full pipeline), synth (write a synthetic RGB-D sequence to
disk), render (single view from a saved map), eval-ate, eval-render.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, PipelineConfig, dump_config, load_config, parse_config
from .datasets import TrajectorySpec, synth_scene, write_tum_layout
from .geometry import CameraIntrinsics, PoseSE3, quat_to_rotmat
from .mapping import load_map
from .metrics import ate_rmse, psnr
from .rasterizer import RenderConfig, render_frame
from .tensorio import FormatError, load_trajectory_tum, write_png


def _build_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    overrides = list(args.set or [])
    if args.output:
        overrides.append(f"output_dir = {args.output}")
    if overrides:
        cfg = parse_config(dump_config(cfg) + "\n".join(overrides) + "\n")
    return cfg


def _cmd_run(args) -> int:
    from . import pipeline

    cfg = _build_config(args)
    summary = pipeline.run(cfg, refine=args.refine, log=print)
    print(json.dumps(summary, indent=2, default=float))
    return 1 if summary.get("aborted") else 0


def _cmd_synth(args) -> int:
    import math

    sc = synth_scene(args.seed, args.gaussians, args.classes,
                     TrajectorySpec(frames=args.frames,
                                    span=math.radians(args.span_deg)),
                     args.width, args.height)
    n = write_tum_layout(sc.frames, sc.gt_poses, args.out,
                         features=not args.no_features)
    print(f"wrote {n} frames to {args.out}")
    return 0


def _parse_pose(text: str) -> PoseSE3:
    vals = [float(v) for v in text.split()]
    if len(vals) != 7:
        raise ValueError("pose needs 7 values: tx ty tz qx qy qz qw")
    tx, ty, tz, qx, qy, qz, qw = vals
    q = np.array([qw, qx, qy, qz])
    q = q / np.linalg.norm(q)
    return PoseSE3(quat_to_rotmat(q), np.array([tx, ty, tz]))


def _cmd_render(args) -> int:
    gmap = load_map(args.map)
    pose = _parse_pose(args.pose)
    k = CameraIntrinsics(fx=args.fx, fy=args.fy,
                         cx=args.cx if args.cx >= 0 else (args.width - 1) / 2.0,
                         cy=args.cy if args.cy >= 0 else (args.height - 1) / 2.0,
                         width=args.width, height=args.height)
    channels = ("color", "median") if args.depth else ("color",)
    out = render_frame(gmap, pose, k, channels=channels,
                       cfg=RenderConfig(threads=args.threads))
    write_png(args.out, out.color)
    print(f"wrote {args.out}")
    if args.depth:
        d = out.depth_median
        lim = d[d > 0].max() if (d > 0).any() else 1.0
        write_png(args.depth, d / lim)
        print(f"wrote {args.depth} (scaled by 1/{lim:.3f})")
    return 0


def _cmd_eval_ate(args) -> int:
    et, est = load_trajectory_tum(args.est)
    gt_t, gt = load_trajectory_tum(args.gt)
    err = ate_rmse(est, gt, et, gt_t, tol=args.tol)
    print(f"ate_rmse {err:.6f}")
    return 0


def _cmd_eval_render(args) -> int:
    from .datasets import load_tum_sequence
    from .metrics import associate_timestamps

    gmap = load_map(args.map)
    frames, gt_times, gt_poses, _ = load_tum_sequence(args.dataset,
                                                      max_frames=args.max_frames)
    if gt_poses is None:
        raise FormatError("dataset has no groundtruth.txt")
    ft = np.array([fr.timestamp for fr in frames])
    pairs = associate_timestamps(ft, np.asarray(gt_times))
    matched = [(frames[a], gt_poses[b]) for a, b in pairs]
    cfg = RenderConfig(threads=args.threads)
    rows = []
    for fr, pose in matched[::args.stride]:
        out = render_frame(gmap, pose, fr.intrinsics,
                           channels=("color", "median"), cfg=cfg)
        valid = (fr.depth > 0) & (out.depth_median > 0)
        l1 = float(np.abs(out.depth_median - fr.depth)[valid].mean()) if valid.any() \
            else float("nan")
        rows.append((psnr(out.color, fr.rgb), l1))
    p = float(np.mean([r[0] for r in rows]))
    l1 = float(np.nanmean([r[1] for r in rows]))
    print(f"frames {len(rows)} psnr {p:.2f} depth_l1 {l1:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fslam")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="track and map a sequence")
    p.add_argument("--config", default="", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--output", default="", help="override output_dir")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--refine", dest="refine", action="store_true", default=None)
    g.add_argument("--no-refine", dest="refine", action="store_false")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("synth", help="write a synthetic RGB-D sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=120)
    p.add_argument("--gaussians", type=int, default=5000)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--span-deg", type=float, default=360.0)
    p.add_argument("--no-features", action="store_true",
                   help="skip per-frame feature pyramid files")
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("render", help="render one view from a saved map")
    p.add_argument("--map", required=True)
    p.add_argument("--pose", required=True, metavar='"tx ty tz qx qy qz qw"')
    p.add_argument("--out", required=True, help="color PNG path")
    p.add_argument("--depth", default="", help="optional depth PNG path")
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=120)
    p.add_argument("--fx", type=float, default=120.0)
    p.add_argument("--fy", type=float, default=120.0)
    p.add_argument("--cx", type=float, default=-1.0, help="default: image center")
    p.add_argument("--cy", type=float, default=-1.0, help="default: image center")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=_cmd_render)

    p = sub.add_parser("eval-ate", help="trajectory error between TUM files")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--tol", type=float, default=0.02)
    p.set_defaults(fn=_cmd_eval_ate)

    p = sub.add_parser("eval-render", help="render quality of a map on a dataset")
    p.add_argument("--map", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--stride", type=int, default=5)
    p.add_argument("--max-frames", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=_cmd_eval_render)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
