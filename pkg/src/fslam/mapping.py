"""Map growth and hygiene: insertion, importance pruning, bounded optimization,
and the post-trajectory refinement pass.

Insertion back-projects keyframe depth on a pixel grid. Pruning ranks splats
by an importance score psi, the per-splat sum over touched pixels of
|dL/dalpha| from the color and feature channels, and removes a capped
percentile of the weakest, sparing the newest round. Optimization is plain
Adam on all splat parameter groups with quaternions re-normalized after every
step; tracking and mapping never touch each other's state (poses are inputs
here, never outputs).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import GaussianMap
from .losses import LossDiagnosticError, LossWeights, total_loss
from .rasterizer import DEFAULT_CONFIG, RenderConfig, backward_render, render_frame

MAP_MAGIC = b"FSMP"
MAP_VERSION = 1


@dataclass
class ImportanceRecord:
    psi: np.ndarray     # (N,) >= 0, finite
    round: int
    # splats the sampled views actually considered (projected and binned);
    # None means everything. Splats outside every view keep psi = 0 but must
    # not be pruned against views that never saw them.
    candidates: Optional[np.ndarray] = None


@dataclass
class MaintenanceConfig:
    insert_stride: int = 6
    spacing_knn: int = 3
    prune_track_pct: float = 10.0
    prune_map_pct: float = 30.0
    protect_rounds: int = 1
    max_size_frac: float = 0.10      # of scene_extent
    min_opacity: float = 0.005
    lambda_c: float = 1.0
    lambda_f: float = 1.0
    score_window: int = 4
    opt_window: int = 8
    opt_steps: int = 10
    densify_grad_frac: float = 2e-4  # of scene_extent
    densify_size_frac: float = 0.01
    refine_clamp_lo: float = 0.1
    refine_clamp_hi: float = 3.0


def insert_from_keyframe(gmap: GaussianMap, frame, codec=None, stride: int = 6,
                         insertion_round: int = 0) -> bool:
    """Back-project every stride-th valid depth pixel into new splats.

    New splats start isotropic at the local k-NN spacing of the inserted
    cloud, opacity 0.5, color from the pixel, latent from the encoded pyramid
    sample. Returns False (map untouched) when no depth is valid.
    """
    if frame.pose is None:
        raise ValueError("frame has no pose")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    k = frame.intrinsics
    sub = frame.depth[::stride, ::stride]
    valid = sub > 0
    if not valid.any():
        return False
    rays = k.backproject_grid()[::stride, ::stride]
    pts_cam = (rays * sub[..., None])[valid]
    mu = frame.pose.apply(pts_cam)
    n = len(mu)
    color = frame.rgb[::stride, ::stride][valid]

    if n >= 4:
        tree = cKDTree(mu)
        d, _ = tree.query(mu, k=4)
        spacing = np.maximum(d[:, 1:].mean(axis=1), 1e-4)
    else:
        spacing = np.full(n, 0.01 * gmap.scene_extent)
    scales = np.repeat(spacing[:, None], 3, axis=1)

    if codec is not None and frame.pyramid is not None:
        from .features import sample_pyramid_batch

        vv, uu = np.nonzero(valid)
        xy = np.stack([uu * stride, vv * stride], axis=1).astype(np.float64)
        latent = codec.encode(sample_pyramid_batch(frame.pyramid, xy, (k.width, k.height)))
    else:
        latent = np.zeros((n, gmap.latent_dim))

    quat = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    gmap.append(mu, scales, quat, np.clip(color, 0.0, 1.0), np.full(n, 0.5),
                latent, insertion_round=insertion_round)
    return True


def importance_scores(gmap: GaussianMap, keyframes: Sequence, codec=None,
                      weights: Optional[LossWeights] = None,
                      lambda_c: float = 1.0, lambda_f: float = 1.0,
                      cfg: RenderConfig = DEFAULT_CONFIG,
                      current_round: int = 0) -> ImportanceRecord:
    """psi_i = sum over sampled views and touched pixels of the weighted
    |dL/dalpha_i|, split into color and feature channel contributions."""
    weights = weights or LossWeights()
    psi = np.zeros(len(gmap))
    seen = np.zeros(len(gmap), dtype=bool)
    channels = ("color", "feature") if codec is not None else ("color",)
    for fr in keyframes:
        out, rec = render_frame(gmap, fr.pose, fr.intrinsics,
                                channels=channels, cfg=cfg, record=True)
        _, grads, _, _ = total_loss(out, fr, codec, gmap.scales, weights,
                                    step=0, include_regularizers=False)
        pg = backward_render(rec, grads,
                             score_weights={"color": lambda_c, "feature": lambda_f},
                             score_only=True)
        psi += lambda_c * pg.alpha_scores["color"]
        psi += lambda_f * pg.alpha_scores["feature"]
        seen[rec.cache.rows] = True
    if not np.all(np.isfinite(psi)):
        raise ValueError("non-finite importance scores")
    return ImportanceRecord(psi=psi, round=current_round, candidates=seen)


def prune_percentile(gmap: GaussianMap, record: ImportanceRecord, p: float,
                     protect_rounds: int = 1) -> int:
    """Remove splats at or below the nearest-rank p-th percentile of psi.

    The percentile is taken over ``record.candidates`` (the splats the scoring
    views considered); splats no sampled view could see are never removed.
    Splats inserted within the last ``protect_rounds`` rounds are spared, the
    removal count is capped at ceil(p*M/100) for M candidates, and ties
    resolve by index so the operation is deterministic. Returns the number
    removed.
    """
    if not (0 <= p < 100):
        raise ValueError("p must be in [0, 100)")
    n = len(gmap)
    if p == 0 or n == 0:
        return 0
    psi = np.asarray(record.psi)
    if len(psi) != n:
        raise ValueError("record does not match map size")
    if record.candidates is None:
        idx = np.arange(n)
    else:
        if len(record.candidates) != n:
            raise ValueError("candidate mask does not match map size")
        idx = np.nonzero(record.candidates)[0]
    m = len(idx)
    if m == 0:
        return 0
    sub = psi[idx]
    order = np.lexsort((idx, sub))
    cap = int(np.ceil(p / 100.0 * m))
    thresh = sub[order[cap - 1]]
    protected = gmap.insertion_round > record.round - protect_rounds
    ordered = idx[order]
    cand = ordered[(sub[order] <= thresh) & ~protected[ordered]]
    victims = cand[:cap]
    if len(victims) == 0:
        return 0
    mask = np.ones(n, dtype=bool)
    mask[victims] = False
    gmap.keep(mask)
    return int(len(victims))


def standard_prune(gmap: GaussianMap, max_world_size: Optional[float] = None,
                   min_opacity: float = 0.005) -> int:
    """Drop splats that grew too large or faded out; idempotent."""
    if len(gmap) == 0:
        return 0
    if max_world_size is None:
        max_world_size = 0.10 * gmap.scene_extent
    bad = (gmap.scales.max(axis=1) > max_world_size) | (gmap.opacity < min_opacity)
    removed = int(bad.sum())
    if removed:
        gmap.keep(~bad)
    return removed


@dataclass
class OptimConfig:
    lr_mu_frac: float = 2e-4      # times scene_extent
    lr_scales: float = 5e-3
    lr_quat: float = 1e-3
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_latent: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    opacity_lo: float = 1e-4
    opacity_hi: float = 0.9999
    scale_floor: float = 1e-6


class MapOptimizer:
    """Adam over the splat parameter groups.

    State is keyed to the map generation: any structural edit (insert/prune)
    resets the moments, since rows no longer line up.
    """

    GROUPS = ("mu", "scales", "quat", "color", "opacity", "latent")

    def __init__(self, cfg: OptimConfig = OptimConfig()):
        self.cfg = cfg
        self._gen = None
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}
        self._t = 0

    def _ensure(self, gmap: GaussianMap):
        if self._gen != gmap.generation:
            self._gen = gmap.generation
            self._t = 0
            for g in self.GROUPS:
                arr = getattr(gmap, g)
                self._m[g] = np.zeros_like(arr, dtype=np.float64)
                self._v[g] = np.zeros_like(arr, dtype=np.float64)

    def apply(self, gmap: GaussianMap, grads: Dict[str, np.ndarray]):
        self._ensure(gmap)
        c = self.cfg
        lrs = {"mu": c.lr_mu_frac * gmap.scene_extent, "scales": c.lr_scales,
               "quat": c.lr_quat, "color": c.lr_color, "opacity": c.lr_opacity,
               "latent": c.lr_latent}
        self._t += 1
        t = self._t
        for g in self.GROUPS:
            grad = grads[g]
            m = self._m[g]
            v = self._v[g]
            m *= c.beta1
            m += (1 - c.beta1) * grad
            v *= c.beta2
            v += (1 - c.beta2) * grad * grad
            mhat = m / (1 - c.beta1**t)
            vhat = v / (1 - c.beta2**t)
            getattr(gmap, g)[...] -= lrs[g] * mhat / (np.sqrt(vhat) + c.eps)
        np.clip(gmap.opacity, c.opacity_lo, c.opacity_hi, out=gmap.opacity)
        np.clip(gmap.scales, c.scale_floor, gmap.scene_extent, out=gmap.scales)
        np.clip(gmap.color, 0.0, 1.0, out=gmap.color)
        gmap.normalize_rotations()


def _step_once(gmap, frame, codec, weights, step_idx, cfg, optimizer):
    """One optimization step on one keyframe; returns the loss or None if the
    step had to be rolled back (non-finite loss or gradients)."""
    channels = ("color", "feature", "depth", "median") if codec is not None \
        else ("color", "depth", "median")
    out, rec = render_frame(gmap, frame.pose, frame.intrinsics,
                            channels=channels, cfg=cfg, record=True)
    try:
        loss, grads, scale_grads, _ = total_loss(out, frame, codec, gmap.scales,
                                                 weights, step=step_idx)
    except LossDiagnosticError:
        return None
    pg = backward_render(rec, grads)
    full = {"mu": pg.mu, "scales": pg.scales + scale_grads, "quat": pg.quat,
            "color": pg.color, "opacity": pg.opacity, "latent": pg.latent}
    for arr in full.values():
        if not np.all(np.isfinite(arr)):
            return None
    optimizer.apply(gmap, full)
    return loss


def optimize_map_step(gmap: GaussianMap, keyframe_window: Sequence, codec=None,
                      weights: Optional[LossWeights] = None, max_steps: int = 10,
                      rng: Optional[np.random.Generator] = None,
                      optimizer: Optional[MapOptimizer] = None,
                      cfg: RenderConfig = DEFAULT_CONFIG,
                      step_offset: int = 0) -> List[float]:
    """Up to max_steps Adam steps, each on one randomly drawn window keyframe."""
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    if not len(keyframe_window):
        raise ValueError("empty keyframe window")
    if len(gmap) == 0:
        return []
    weights = weights or LossWeights()
    rng = rng or np.random.default_rng(0)
    optimizer = optimizer or MapOptimizer()
    trace = []
    for s in range(max_steps):
        fr = keyframe_window[int(rng.integers(len(keyframe_window)))]
        loss = _step_once(gmap, fr, codec, weights, step_offset + s, cfg, optimizer)
        if loss is not None:
            trace.append(loss)
    return trace


def _mean_psnr(gmap, keyframes, cfg):
    vals = []
    for fr in keyframes:
        out = render_frame(gmap, fr.pose, fr.intrinsics, channels=("color",), cfg=cfg)
        mse = float(np.mean((np.clip(out.color, 0, 1) - fr.rgb) ** 2))
        vals.append(99.0 if mse == 0 else min(10.0 * np.log10(1.0 / mse), 99.0))
    return float(np.mean(vals))


def _positional_gradients(gmap, keyframes, codec, weights, cfg):
    g = np.zeros(len(gmap))
    for fr in keyframes:
        out, rec = render_frame(gmap, fr.pose, fr.intrinsics,
                                channels=("color", "feature", "depth", "median"),
                                cfg=cfg, record=True)
        try:
            _, grads, _, _ = total_loss(out, fr, codec, gmap.scales, weights,
                                        step=0, include_regularizers=False)
        except LossDiagnosticError:
            continue
        pg = backward_render(rec, grads)
        g += np.linalg.norm(pg.mu, axis=1)
    return g / max(len(keyframes), 1)


def _densify(gmap, keyframes, codec, weights, rng, cfg, mcfg: MaintenanceConfig,
             insertion_round: int):
    """Classic clone/split on splats with large positional gradients."""
    if len(gmap) == 0:
        return 0
    grad = _positional_gradients(gmap, keyframes, codec, weights, cfg)
    hot = grad > mcfg.densify_grad_frac * gmap.scene_extent
    if not hot.any():
        return 0
    small = gmap.scales.max(axis=1) <= mcfg.densify_size_frac * gmap.scene_extent
    clone_idx = np.nonzero(hot & small)[0]
    split_idx = np.nonzero(hot & ~small)[0]

    new = {k: [] for k in ("mu", "scales", "quat", "color", "opacity", "latent")}

    def stage(idx, mu, scales):
        new["mu"].append(mu)
        new["scales"].append(scales)
        new["quat"].append(gmap.quat[idx])
        new["color"].append(gmap.color[idx])
        new["opacity"].append(gmap.opacity[idx])
        new["latent"].append(gmap.latent[idx])

    if len(clone_idx):
        jitter = rng.normal(size=(len(clone_idx), 3)) * 0.1 * gmap.scales[clone_idx]
        stage(clone_idx, gmap.mu[clone_idx] + jitter, gmap.scales[clone_idx])
    if len(split_idx):
        from .geometry import quats_to_rotmats

        R = quats_to_rotmats(gmap.quat[split_idx])
        for _ in range(2):
            local = rng.normal(size=(len(split_idx), 3)) * gmap.scales[split_idx]
            mu = gmap.mu[split_idx] + np.einsum("nij,nj->ni", R, local)
            stage(split_idx, mu, gmap.scales[split_idx] / 1.6)

    keep_mask = np.ones(len(gmap), dtype=bool)
    keep_mask[split_idx] = False
    gmap.keep(keep_mask)
    gmap.append(np.concatenate(new["mu"]), np.concatenate(new["scales"]),
                np.concatenate(new["quat"]), np.concatenate(new["color"]),
                np.concatenate(new["opacity"]), np.concatenate(new["latent"]),
                insertion_round=insertion_round)
    return len(clone_idx) + 2 * len(split_idx)


def spacing_clamp(gmap: GaussianMap, k: int = 3, lo: float = 0.1, hi: float = 3.0):
    """Clamp scales to [lo, hi] times the local k-NN spacing of the means."""
    if len(gmap) < k + 1:
        return
    tree = cKDTree(gmap.mu)
    d, _ = tree.query(gmap.mu, k=k + 1)
    spacing = np.maximum(d[:, 1:].mean(axis=1), 1e-6)
    gmap.scales = np.clip(gmap.scales, lo * spacing[:, None], hi * spacing[:, None])


def post_trajectory_refine(gmap: GaussianMap, all_keyframes: Sequence, codec=None,
                           weights: Optional[LossWeights] = None,
                           iterations: int = 0, densify: bool = False,
                           rng: Optional[np.random.Generator] = None,
                           cfg: RenderConfig = DEFAULT_CONFIG,
                           mcfg: MaintenanceConfig = MaintenanceConfig(),
                           opt_cfg: OptimConfig = OptimConfig()) -> Dict:
    """Distance-filter clamp, then optional extra optimization and densification.

    The refined map is kept only if its mean keyframe PSNR does not drop below
    the pre-refinement value; otherwise the original is restored, so the pass
    never makes the rendered keyframes worse.
    """
    weights = weights or LossWeights()
    rng = rng or np.random.default_rng(0)
    spacing_clamp(gmap, mcfg.spacing_knn, mcfg.refine_clamp_lo, mcfg.refine_clamp_hi)
    info = {"iterations": iterations, "densified": 0, "reverted": False}
    if iterations <= 0 or not len(all_keyframes) or len(gmap) == 0:
        return info

    pre_map = gmap.copy()
    pre_psnr = _mean_psnr(gmap, all_keyframes, cfg)
    probe_stride = max(1, len(all_keyframes) // 4)
    probe = list(all_keyframes)[::probe_stride][:4]
    optimizer = MapOptimizer(opt_cfg)
    densify_at = {0, iterations // 2} if densify else set()
    for s in range(iterations):
        if s in densify_at:
            info["densified"] += _densify(gmap, probe, codec, weights, rng, cfg,
                                          mcfg, insertion_round=-1)
        fr = all_keyframes[int(rng.integers(len(all_keyframes)))]
        _step_once(gmap, fr, codec, weights, s, cfg, optimizer)

    post_psnr = _mean_psnr(gmap, all_keyframes, cfg)
    info["psnr_before"] = pre_psnr
    info["psnr_after"] = post_psnr
    if post_psnr < pre_psnr:
        for name in ("mu", "scales", "quat", "color", "opacity", "latent",
                     "insertion_round"):
            setattr(gmap, name, getattr(pre_map, name))
        gmap.generation += 1
        info["reverted"] = True
        info["psnr_after"] = pre_psnr
    return info


# ---- serialization ----

def save_map(gmap: GaussianMap, path):
    """FSMP container: header then per-splat little-endian f32 records."""
    d = gmap.latent_dim
    header = MAP_MAGIC + struct.pack("<III f", MAP_VERSION, len(gmap), d,
                                     gmap.scene_extent)
    rec = np.concatenate([
        gmap.mu, gmap.scales, gmap.quat, gmap.color,
        gmap.opacity[:, None], gmap.insertion_round[:, None].astype(np.float64),
        gmap.latent,
    ], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def load_map(path) -> GaussianMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAP_MAGIC:
        raise ValueError("not a map file")
    version, count, d, extent = struct.unpack_from("<III f", raw, 4)
    if version != MAP_VERSION:
        raise ValueError(f"unsupported map version {version}")
    width = 15 + d
    body = np.frombuffer(raw, dtype="<f4", offset=4 + struct.calcsize("<III f"))
    if body.size != count * width:
        raise ValueError("map payload size mismatch")
    rec = body.reshape(count, width).astype(np.float64)
    gmap = GaussianMap(latent_dim=d, scene_extent=float(extent))
    gmap.append(rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10:13],
                rec[:, 13], rec[:, 15:],
                insertion_round=rec[:, 14].astype(np.int64))
    return gmap


def export_ply(gmap: GaussianMap, path):
    """Binary PLY with positions, colors, opacities for external viewers."""
    n = len(gmap)
    header = "\n".join([
        "ply", "format binary_little_endian 1.0", f"element vertex {n}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        "property float opacity", "end_header", ""])
    dt = np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3), ("op", "<f4")])
    rows = np.empty(n, dtype=dt)
    rows["xyz"] = gmap.mu
    rows["rgb"] = np.clip(gmap.color * 255.0, 0, 255).round()
    rows["op"] = gmap.opacity
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rows.tobytes())
