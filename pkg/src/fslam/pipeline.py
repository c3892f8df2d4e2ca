"""Per-frame orchestration: track, keyframe bookkeeping, mapping rounds, artifacts.

The loop per frame: predict a pose with a constant-velocity model, register the
backprojected cloud against the latest map snapshot, gate a keyframe decision,
and on keyframes insert / score / prune / optimize and (every Nth keyframe)
adapt the codec. The tracker only ever sees the snapshot published at the end
of the previous keyframe round.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .config import PipelineConfig, dump_config
from .datasets import TrajectorySpec, build_feature_corpus, load_tum_sequence, synth_scene
from .features import LatentCodec, adapt_online, pretrain, sample_pyramid_batch, save_codec
from .geometry import FeaturePyramid, Frame, GaussianMap, PoseSE3, pose_compose
from .losses import LossWeights
from .mapping import (MaintenanceConfig, MapOptimizer, export_ply, importance_scores,
                      insert_from_keyframe, optimize_map_step, post_trajectory_refine,
                      prune_percentile, save_map, standard_prune)
from .metrics import PSNR_SENTINEL, ate_rmse, image_metrics, miou_eval
from .rasterizer import DEFAULT_CONFIG, RenderConfig, render_frame
from .tensorio import read_tensor, write_trajectory_tum
from .tracking import (TrackConfig, TrackResult, feature_gicp_align,
                       keyframe_decision, source_cloud_from_frame,
                       target_cloud_from_map)


class PipelineAbort(RuntimeError):
    """Tracking lost three frames in a row; partial artifacts still get written."""


@dataclass
class FrameReport:
    index: int
    timestamp: float
    pose: PoseSE3
    kf_kind: str = "none"
    rms: float = 0.0
    inliers: int = 0
    tracked: bool = True
    bootstrap: bool = False
    map_size: int = 0
    opt_loss: Optional[float] = None
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    depth_l1: Optional[float] = None

    def to_dict(self) -> Dict:
        d = {"index": self.index, "timestamp": self.timestamp,
             "kf": self.kf_kind, "rms": _finite(self.rms),
             "inliers": self.inliers, "tracked": self.tracked,
             "map_size": self.map_size}
        if self.bootstrap:
            d["bootstrap"] = True
        for key in ("opt_loss", "psnr", "ssim", "depth_l1"):
            val = getattr(self, key)
            if val is not None:
                d[key] = _finite(val)
        return d


def _finite(v):
    v = float(v)
    return v if math.isfinite(v) else None


class PipelineState:
    """Everything the frame loop mutates; built by init_state."""

    def __init__(self, cfg: PipelineConfig, codec: Optional[LatentCodec],
                 rcfg: Optional[RenderConfig] = None):
        self.cfg = cfg
        self.codec = codec
        self.tcfg = cfg.track_config()
        self.weights = cfg.loss_weights()
        self.mcfg = cfg.maintenance_config()
        self.rcfg = rcfg or cfg.render_config()
        self.gmap: Optional[GaussianMap] = None
        self.optimizer: Optional[MapOptimizer] = None
        self.keyframes: List[Frame] = []
        self.kf_count = 0
        self.round = 0
        self.opt_step = 0
        self.adapt_steps = 0
        self.last_kf_pose: Optional[PoseSE3] = None
        self.prev_pose: Optional[PoseSE3] = None
        self.last_rel: Optional[PoseSE3] = None
        self.target = None
        self.target_gen = -1
        self.fails = 0
        self.reports: List[FrameReport] = []
        self.rng = np.random.default_rng(cfg.seed + 1)


def init_state(cfg: PipelineConfig, codec: Optional[LatentCodec] = None,
               rcfg: Optional[RenderConfig] = None) -> PipelineState:
    return PipelineState(cfg, codec, rcfg)


def _depth_extent(frame: Frame) -> float:
    """Scene scale guess: span of the backprojected first-frame cloud."""
    ys, xs = np.nonzero(frame.depth > 0)
    if len(ys) == 0:
        return 1.0
    z = frame.depth[ys, xs]
    k = frame.intrinsics
    pts = np.stack([(xs - k.cx) / k.fx * z, (ys - k.cy) / k.fy * z, z], axis=1)
    return float(np.clip(np.ptp(pts, axis=0).max(), 1.0, 100.0))


def _refresh_snapshot(state: PipelineState):
    if state.gmap.generation != state.target_gen:
        state.target = target_cloud_from_map(state.gmap)
        state.target_gen = state.gmap.generation


def _adapt_codec(state: PipelineState, frame: Frame):
    """One adapter batch on rendered-vs-observed features, swapped in atomically."""
    k = frame.intrinsics
    out = render_frame(state.gmap, frame.pose, k, ("feature",), state.rcfg)
    ys, xs = np.nonzero(out.alpha_acc > 0.5)
    if len(ys) < 16:
        return
    sel = state.rng.choice(len(ys), size=min(state.cfg.adapt_batch, len(ys)),
                           replace=False)
    px = np.stack([xs[sel], ys[sel]], axis=1).astype(np.float64)
    f = out.feature[ys[sel], xs[sel]]
    u = sample_pyramid_batch(frame.pyramid, px, (k.width, k.height))
    cand = state.codec.copy()
    state.adapt_steps += 1
    adapt_online(cand, f, u, step=state.adapt_steps, base_lr=state.cfg.adapt_lr)
    state.codec = cand


def _keyframe_ops(state: PipelineState, frame: Frame, kind: str, rep: FrameReport):
    mcfg = state.mcfg
    state.round += 1
    insert_from_keyframe(state.gmap, frame, state.codec, mcfg.insert_stride,
                         insertion_round=state.round)
    state.keyframes.append(frame)
    state.kf_count += 1
    state.last_kf_pose = frame.pose
    rep.kf_kind = kind

    window = state.keyframes[-mcfg.score_window:]
    rec = importance_scores(state.gmap, window, state.codec, state.weights,
                            lambda_c=mcfg.lambda_c, lambda_f=mcfg.lambda_f,
                            cfg=state.rcfg, current_round=state.round)
    pct = mcfg.prune_map_pct if kind == "mapping_kf" else mcfg.prune_track_pct
    prune_percentile(state.gmap, rec, pct, mcfg.protect_rounds)
    standard_prune(state.gmap, mcfg.max_size_frac * state.gmap.scene_extent,
                   mcfg.min_opacity)

    trace = optimize_map_step(state.gmap, state.keyframes[-mcfg.opt_window:],
                              state.codec, state.weights,
                              max_steps=mcfg.opt_steps, rng=state.rng,
                              optimizer=state.optimizer, cfg=state.rcfg,
                              step_offset=state.opt_step)
    state.opt_step += mcfg.opt_steps
    if trace:
        rep.opt_loss = trace[-1]

    if kind == "mapping_kf" and state.codec is not None and frame.pyramid is not None:
        _adapt_codec(state, frame)
    _refresh_snapshot(state)


def _bootstrap(state: PipelineState, frame: Frame, rep: FrameReport):
    cfg = state.cfg
    extent = cfg.scene_extent or _depth_extent(frame)
    dim = state.codec.latent_dim if state.codec is not None else cfg.latent_dim
    state.gmap = GaussianMap(latent_dim=dim, scene_extent=extent)
    state.optimizer = MapOptimizer(cfg.optim_config())
    rep.bootstrap = True
    _keyframe_ops(state, frame, "mapping_kf", rep)


def process_frame(state: PipelineState, frame: Frame) -> FrameReport:
    cfg = state.cfg
    idx = len(state.reports)
    rep = FrameReport(index=idx, timestamp=frame.timestamp, pose=PoseSE3.identity())

    if idx == 0:
        frame.pose = PoseSE3.identity()
        _bootstrap(state, frame, rep)
    else:
        init = state.prev_pose if state.last_rel is None \
            else pose_compose(state.prev_pose, state.last_rel)
        try:
            src = source_cloud_from_frame(frame, state.codec, state.tcfg)
            res = feature_gicp_align(src, state.target, init, state.tcfg)
        except ValueError:
            # unusable sensor frame (no valid depth): a tracking failure,
            # not a crash
            res = TrackResult(init, float("inf"), 0, 0, success=False)
        if res.success:
            frame.pose = res.pose
            state.fails = 0
            rep.rms, rep.inliers = res.rms_residual, res.inlier_count
        else:
            frame.pose = init
            rep.tracked = False
            state.fails += 1
        rep.pose = frame.pose
        if state.fails >= 3:
            state.reports.append(rep)
            raise PipelineAbort("tracking failed on three consecutive frames")
        if res.success:
            kind = keyframe_decision(frame.pose, state.last_kf_pose, rep.rms,
                                     state.tcfg, state.kf_count)
            if kind != "none":
                _keyframe_ops(state, frame, kind, rep)

    if state.prev_pose is not None:
        state.last_rel = pose_compose(state.prev_pose.inverse(), frame.pose)
    state.prev_pose = frame.pose

    if cfg.metrics_every > 0 and idx % cfg.metrics_every == 0:
        out = render_frame(state.gmap, frame.pose, frame.intrinsics,
                           ("color", "depth"), state.rcfg)
        rep.psnr, rep.ssim, rep.depth_l1 = image_metrics(out, frame)
    rep.map_size = len(state.gmap)
    state.reports.append(rep)
    return rep


# ---- dataset plumbing ----

def _load_dataset(cfg: PipelineConfig):
    """-> (frames, gt_times or None, gt_poses or None, class codes or None)."""
    if cfg.dataset == "synthetic":
        scene = synth_scene(cfg.seed, n_gaussians=cfg.scene_gaussians,
                            n_classes=cfg.scene_classes,
                            traj=TrajectorySpec(
                                frames=cfg.frames,
                                span=math.radians(cfg.traj_span_deg)),
                            width=cfg.width, height=cfg.height)
        return scene.frames, None, list(scene.gt_poses), scene.codes
    frames, gt_times, gt_poses, skipped = load_tum_sequence(
        cfg.dataset, cfg.max_frames or None)
    if not frames:
        raise FileNotFoundError(f"no usable frames under {cfg.dataset}")
    return frames, gt_times, gt_poses, None


def load_pyramid_files(directory, name: str) -> Optional[FeaturePyramid]:
    directory = Path(directory)
    levels = []
    for tag in ("16", "8", "4"):
        path = directory / f"{name}_level{tag}.fstf"
        if not path.exists():
            return None
        levels.append(read_tensor(path).astype(np.float64))
    pyr = FeaturePyramid(*levels)
    pyr.validate()
    return pyr


def _attach_features(cfg: PipelineConfig, frames: List[Frame]) -> str:
    """Apply the feature source policy; returns the source actually in effect."""
    if cfg.feature_source == "none":
        for fr in frames:
            fr.pyramid = None
        return "none"
    if cfg.feature_source == "files":
        directory = cfg.feature_dir or (Path(cfg.dataset) / "features"
                                        if cfg.dataset != "synthetic" else "")
        hits = 0
        if directory and Path(directory).is_dir():
            for fr in frames:
                pyr = load_pyramid_files(directory, fr.name)
                if pyr is not None:
                    fr.pyramid = pyr
                    hits += 1
        if hits:
            return "files"
        # fall through: keep synthetic pyramids when the scene provides them
        if any(fr.pyramid is not None for fr in frames):
            return "synthetic"
        return "none"
    if any(fr.pyramid is not None for fr in frames):
        return "synthetic"
    return "none"


def _pretrain_codec(cfg: PipelineConfig, frames: List[Frame]) -> Optional[LatentCodec]:
    usable = [fr for fr in frames if fr.pyramid is not None]
    if not usable:
        return None
    idx = np.unique(np.linspace(0, len(usable) - 1,
                                min(cfg.corpus_frames, len(usable))).astype(int))
    corpus = build_feature_corpus([usable[i] for i in idx],
                                  per_frame=cfg.corpus_per_frame,
                                  seed=cfg.seed + 17)
    codec = LatentCodec.create(cfg.latent_dim, seed=cfg.seed)
    pretrain(codec, corpus, steps=cfg.pretrain_steps, batch=cfg.pretrain_batch,
             lr=cfg.pretrain_lr, seed=cfg.seed + 1)
    return codec


# ---- end-of-run evaluation and artifacts ----

def _final_eval(state: PipelineState, codes: Optional[np.ndarray]) -> Dict:
    """Render every keyframe against the final map and aggregate quality."""
    psnrs, depth_l1s, mious = [], [], []
    want_feat = state.codec is not None and codes is not None
    for fr in state.keyframes:
        channels = ("color", "depth", "feature") if want_feat and fr.class_ids is not None \
            else ("color", "depth")
        out = render_frame(state.gmap, fr.pose, fr.intrinsics, channels, state.rcfg)
        p, _, d = image_metrics(out, fr)
        psnrs.append(p)
        if math.isfinite(d):
            depth_l1s.append(d)
        if "feature" in channels:
            miou, _ = miou_eval(out.feature, state.codec, codes, fr.class_ids)
            mious.append(miou)
    return {
        "mean_kf_psnr": float(np.mean(psnrs)) if psnrs else None,
        "mean_kf_depth_l1": float(np.mean(depth_l1s)) if depth_l1s else None,
        "mean_kf_miou": float(np.mean(mious)) if mious else None,
        "keyframes": len(state.keyframes),
    }


def write_artifacts(state: PipelineState, out_dir, summary: Dict):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    times = [r.timestamp for r in state.reports]
    poses = [r.pose for r in state.reports]
    if poses:
        write_trajectory_tum(out_dir / "trajectory.txt", times, poses)
    if state.gmap is not None and len(state.gmap):
        save_map(state.gmap, out_dir / "map.fsmp")
        export_ply(state.gmap, out_dir / "map.ply")
    if state.codec is not None:
        save_codec(out_dir / "codec.fstf", state.codec)
    report = {"frames": [r.to_dict() for r in state.reports], "summary": summary}
    (out_dir / "metrics.json").write_text(json.dumps(report, indent=1) + "\n")
    (out_dir / "config.txt").write_text(dump_config(state.cfg))


def run(cfg: PipelineConfig, refine: Optional[bool] = None, log=None) -> Dict:
    """Full pipeline; returns the summary dict also stored in metrics.json."""
    def say(msg):
        if log:
            log(msg)

    t0 = time.time()
    cfg.validate()
    threads = cfg.threads
    env = os.environ.get("FEATURESLAM_THREADS")
    if env:
        threads = max(1, min(threads, int(env)))
    rcfg = cfg.render_config(threads)

    say(f"loading dataset {cfg.dataset!r}")
    frames, gt_times, gt_poses, codes = _load_dataset(cfg)
    source = _attach_features(cfg, frames)
    say(f"feature source: {source} ({len(frames)} frames)")
    codec = _pretrain_codec(cfg, frames) if source != "none" else None
    if codec is not None:
        say(f"codec pretrained (D={codec.latent_dim})")

    state = init_state(cfg, codec, rcfg)
    aborted = False
    for fr in frames:
        try:
            rep = process_frame(state, fr)
        except PipelineAbort as e:
            say(f"aborted: {e}")
            aborted = True
            break
        if log and rep.index % 20 == 0:
            say(f"frame {rep.index}: kf={state.kf_count} map={rep.map_size} "
                f"rms={rep.rms:.4f}")

    do_refine = cfg.refine if refine is None else refine
    refine_info = None
    if do_refine and not aborted and state.gmap is not None:
        say(f"refining for {cfg.refine_iterations} steps")
        refine_info = post_trajectory_refine(
            state.gmap, state.keyframes, state.codec, state.weights,
            iterations=cfg.refine_iterations, densify=True,
            rng=np.random.default_rng(cfg.seed + 2), cfg=rcfg,
            mcfg=state.mcfg, opt_cfg=cfg.optim_config())

    summary = _final_eval(state, codes) if state.gmap is not None else {}
    est_poses = [r.pose for r in state.reports]
    ate = None
    try:
        if gt_poses is not None and gt_times is not None:
            ate = ate_rmse(est_poses, gt_poses,
                           [r.timestamp for r in state.reports], gt_times)
        elif gt_poses is not None:
            ate = ate_rmse(est_poses, gt_poses[:len(est_poses)])
    except ValueError:
        ate = None
    summary.update({
        "ate_rmse": ate,
        "map_size": len(state.gmap) if state.gmap is not None else 0,
        "aborted": aborted,
        "feature_source": source,
        "runtime_sec": round(time.time() - t0, 3),
        "tracking_failures": sum(not r.tracked for r in state.reports),
    })
    if refine_info is not None:
        summary["refine"] = {k: v for k, v in refine_info.items()}
    write_artifacts(state, cfg.output_dir, summary)
    say(f"done in {summary['runtime_sec']}s, artifacts in {cfg.output_dir}")
    return summary
