"""Dataset ingestion: a seeded synthetic room generator and a TUM-layout reader.

The synthetic scene is the workhorse of the test suite. It builds a box room
out of flattened wall splats plus floating blobs, assigns every splat a class
with an orthogonal 352-dim code, and renders ground-truth observations (color,
depth, class-code pyramids, per-pixel class ids) along a circular trajectory
using this package's own rasterizer. Identical seeds give identical scenes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .geometry import (CameraIntrinsics, FeaturePyramid, Frame, GaussianMap,
                       PoseSE3, pyramid_shapes, rotmat_to_quat)
from .rasterizer import RenderConfig, render_frame
from .tensorio import FormatError

CODE_AMPLITUDE = 1.0


@dataclass(frozen=True)
class TrajectorySpec:
    frames: int = 200
    radius: float = 0.5        # meters, circle in the horizontal plane
    height: float = 0.0
    span: float = 2.0 * math.pi
    fps: float = 30.0


@dataclass
class SynthScene:
    gt_map: GaussianMap              # latents hold the 352-dim class codes
    class_ids: np.ndarray            # (N,) class per splat
    codes: np.ndarray                # (n_classes, 352) orthogonal codes
    frames: List[Frame]
    gt_poses: List[PoseSE3]
    gt_class_images: List[np.ndarray]  # (H, W) int64, -1 where nothing renders
    intrinsics: CameraIntrinsics


def class_codes(n_classes: int) -> np.ndarray:
    """Orthogonal per-class codes: a scaled one-hot inside each level slice."""
    if n_classes < 1 or n_classes > 32:
        raise ValueError("n_classes must be in [1, 32]")
    codes = np.zeros((n_classes, 352))
    for c in range(n_classes):
        codes[c, c] = CODE_AMPLITUDE            # level16 slice (0:256)
        codes[c, 256 + c] = CODE_AMPLITUDE      # level8 slice (256:320)
        codes[c, 320 + c] = CODE_AMPLITUDE      # level4 slice (320:352)
    return codes


def circle_pose(theta: float, radius: float, height: float) -> PoseSE3:
    """Camera on a horizontal circle, optical axis pointing radially outward."""
    pos = np.array([radius * math.cos(theta), height, radius * math.sin(theta)])
    z_cam = np.array([math.cos(theta), 0.0, math.sin(theta)])
    y_cam = np.array([0.0, 1.0, 0.0])
    x_cam = np.cross(y_cam, z_cam)
    rot = np.stack([x_cam, y_cam, z_cam], axis=1)
    return PoseSE3(rot, pos)


# Wall splat scales relative to the grid spacing. The in-plane factor trades
# coverage against depth fidelity: the median-depth channel extrapolates each
# splat's depth plane linearly, and that extrapolation under-reports depth at
# oblique incidence by an amount growing with the squared footprint. 0.45
# keeps the walls hole-free while keeping that bias in the millimeter range.
WALL_SCALE_IN_PLANE = 0.45
WALL_SCALE_NORMAL = 0.12


def _wall_grid(rng, origin, u_dir, v_dir, normal, extent, spacing, jitter):
    """Splat centers and orientation for one wall plane."""
    n_side = int(round(extent / spacing)) + 1
    u = np.linspace(-extent / 2, extent / 2, n_side)
    uu, vv = np.meshgrid(u, u)
    pts = (origin[None, :] + uu.reshape(-1, 1) * u_dir[None, :]
           + vv.reshape(-1, 1) * v_dir[None, :])
    pts += rng.normal(scale=jitter, size=pts.shape) * (u_dir + v_dir)[None, :]
    rot = np.stack([u_dir, v_dir, normal], axis=1)
    quat = rotmat_to_quat(rot)
    return pts, quat


def synth_scene(seed: int, n_gaussians: int = 5000, n_classes: int = 6,
                traj: TrajectorySpec = TrajectorySpec(),
                width: int = 160, height: int = 120,
                room: float = 4.0, cfg: Optional[RenderConfig] = None) -> SynthScene:
    """Build the seeded room scene and render all ground-truth observations."""
    if n_gaussians < 1 or n_classes < 1:
        raise ValueError("n_gaussians and n_classes must be >= 1")
    rng = np.random.default_rng(seed)
    cfg = cfg or RenderConfig()
    half = room / 2.0
    codes = class_codes(n_classes)

    # six walls; blobs take whatever budget remains
    walls = [
        (np.array([0.0, 0.0, half]), np.array([1.0, 0.0, 0.0]),
         np.array([0.0, 0.0, 1.0])),
        (np.array([0.0, 0.0, -half]), np.array([1.0, 0.0, 0.0]),
         np.array([0.0, 0.0, -1.0])),
        (np.array([half, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]),
         np.array([1.0, 0.0, 0.0])),
        (np.array([-half, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]),
         np.array([-1.0, 0.0, 0.0])),
        (np.array([0.0, half, 0.0]), np.array([1.0, 0.0, 0.0]),
         np.array([0.0, 1.0, 0.0])),
        (np.array([0.0, -half, 0.0]), np.array([1.0, 0.0, 0.0]),
         np.array([0.0, -1.0, 0.0])),
    ]
    # Walls alone leave in-plane translation almost unobservable to geometric
    # alignment when a frame faces one wall head-on; the blob clutter is what
    # anchors those directions, so it gets a substantial share of the budget.
    n_wall_budget = int(n_gaussians * 0.80)
    per_wall = n_wall_budget // len(walls)
    spacing = room / max(2, int(math.sqrt(per_wall)) - 1)

    gmap = GaussianMap(latent_dim=352, scene_extent=room)
    ids: List[np.ndarray] = []
    for wi, (origin, u_dir, normal) in enumerate(walls):
        v_dir = np.cross(normal, u_dir)   # right-handed [u, v, n] frame
        pts, quat = _wall_grid(rng, origin, u_dir, v_dir, normal,
                               room, spacing, jitter=0.1 * spacing)
        n = len(pts)
        cls = np.full(n, wi % n_classes, dtype=np.int64)
        base = rng.uniform(0.25, 0.75, size=3)
        phase = rng.uniform(0, 2 * math.pi, size=3)
        freq = rng.uniform(2.0, 5.0, size=3)
        coord = pts @ (u_dir + 0.37 * v_dir)
        color = np.clip(base[None, :] + 0.22 * np.sin(
            coord[:, None] * freq[None, :] + phase[None, :]), 0.02, 0.98)
        scales = np.tile([WALL_SCALE_IN_PLANE * spacing,
                          WALL_SCALE_IN_PLANE * spacing,
                          WALL_SCALE_NORMAL * spacing], (n, 1))
        gmap.append(pts, scales, np.tile(quat, (n, 1)), color,
                    np.full(n, 0.95), codes[cls])
        ids.append(cls)

    n_blobs = max(0, n_gaussians - len(gmap))
    if n_blobs:
        pts = rng.uniform(-0.85 * half, 0.85 * half, size=(n_blobs, 3))
        keep = np.linalg.norm(pts[:, [0, 2]], axis=1) > traj.radius + 0.35
        pts = pts[keep]
        n = len(pts)
        cls = rng.integers(0, n_classes, size=n)
        quat = rng.normal(size=(n, 4))
        scales = rng.uniform(0.03, 0.08, size=(n, 3))
        color = rng.uniform(0.1, 0.9, size=(n, 3))
        gmap.append(pts, scales, quat, color, np.full(n, 0.7), codes[cls])
        ids.append(cls)
    class_ids = np.concatenate(ids)

    k = CameraIntrinsics(fx=0.75 * width, fy=0.75 * width,
                         cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                         width=width, height=height)
    level_k = [_scaled_intrinsics(k, lw, lh) for (lw, lh) in pyramid_shapes(width, height)]
    level_slices = [slice(0, 256), slice(256, 320), slice(320, 352)]

    frames, poses, class_images = [], [], []
    for i in range(traj.frames):
        theta = traj.span * i / traj.frames
        pose = circle_pose(theta, traj.radius, traj.height)
        rgb, depth, cls_img = _render_observation(gmap, class_ids, pose, k, cfg)
        pyr = FeaturePyramid(*[_render_feature_level(gmap, pose, lk, cfg)[..., sl]
                               for lk, sl in zip(level_k, level_slices)])
        frames.append(Frame(rgb=rgb, depth=depth, intrinsics=k,
                            timestamp=i / traj.fps, pyramid=pyr,
                            class_ids=cls_img, name=f"frame_{i:06d}"))
        poses.append(pose)
        class_images.append(cls_img)
    return SynthScene(gt_map=gmap, class_ids=class_ids, codes=codes, frames=frames,
                      gt_poses=poses, gt_class_images=class_images, intrinsics=k)


def _scaled_intrinsics(k: CameraIntrinsics, w: int, h: int) -> CameraIntrinsics:
    sx, sy = w / k.width, h / k.height
    return CameraIntrinsics(fx=k.fx * sx, fy=k.fy * sy,
                            cx=(k.cx + 0.5) * sx - 0.5, cy=(k.cy + 0.5) * sy - 0.5,
                            width=w, height=h)


def _render_observation(gmap, class_ids, pose, k, cfg):
    """Sensor-style observation: surface (median) depth, not the blended mean."""
    out = render_frame(gmap, pose, k, channels=("color", "median"), cfg=cfg)
    rgb = np.clip(out.color, 0.0, 1.0)
    depth = np.maximum(out.depth_median, 0.0)
    cls_img = np.where(out.median_index >= 0,
                       class_ids[np.clip(out.median_index, 0, None)], -1)
    return rgb, depth, cls_img


def _render_feature_level(gmap, pose, lk, cfg):
    out = render_frame(gmap, pose, lk, channels=("feature",), cfg=cfg)
    return out.feature


def build_feature_corpus(frames: List[Frame], per_frame: int = 64,
                         seed: int = 0) -> np.ndarray:
    """Sample pyramid vectors at random pixels for codec pretraining."""
    from .features import sample_pyramid_batch

    rng = np.random.default_rng(seed)
    rows = []
    for fr in frames:
        if fr.pyramid is None:
            continue
        k = fr.intrinsics
        xs = np.stack([rng.uniform(0, k.width - 1, size=per_frame),
                       rng.uniform(0, k.height - 1, size=per_frame)], axis=1)
        rows.append(sample_pyramid_batch(fr.pyramid, xs, (k.width, k.height)))
    if not rows:
        raise ValueError("no frames carry pyramids")
    return np.concatenate(rows, axis=0)


# ---- TUM layout ----

def _read_tum_index(path: Path):
    entries = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        entries.append((float(parts[0]), parts[1]))
    return entries


def _associate(rgb_entries, depth_entries, tol: float):
    """Nearest-timestamp pairing within tol seconds; greedy over rgb order."""
    out = []
    skipped = 0
    d_times = np.array([t for t, _ in depth_entries])
    used = np.zeros(len(depth_entries), dtype=bool)
    for t, name in rgb_entries:
        if len(d_times) == 0:
            skipped += 1
            continue
        j = int(np.argmin(np.abs(d_times - t)))
        if abs(d_times[j] - t) <= tol and not used[j]:
            used[j] = True
            out.append((t, name, depth_entries[j][1]))
        else:
            skipped += 1
    return out, skipped


def load_tum_sequence(root, max_frames: Optional[int] = None,
                      tol: float = 0.02):
    """Load a TUM RGB-D directory -> (frames, gt timestamps, gt poses, skipped).

    Depth PNGs are 16-bit with 5000 units per meter. Ground truth, when
    present, is returned separately and never attached to frames.
    """
    from PIL import Image

    from .tensorio import load_trajectory_tum

    root = Path(root)
    rgb_index = root / "rgb.txt"
    depth_index = root / "depth.txt"
    if not rgb_index.exists() or not depth_index.exists():
        raise FileNotFoundError(f"{root} lacks rgb.txt / depth.txt")
    pairs, skipped = _associate(_read_tum_index(rgb_index),
                                _read_tum_index(depth_index), tol)
    if max_frames:
        pairs = pairs[:max_frames]

    override = None
    calib = root / "intrinsics.txt"
    if calib.exists():
        vals = [float(v) for v in calib.read_text().split()]
        if len(vals) != 4:
            raise FormatError("intrinsics.txt must hold fx fy cx cy")
        override = vals

    frames = []
    k = None
    for t, rgb_name, depth_name in pairs:
        try:
            rgb = np.asarray(Image.open(root / rgb_name).convert("RGB"),
                             dtype=np.float64) / 255.0
            depth_raw = np.asarray(Image.open(root / depth_name), dtype=np.float64)
        except OSError:
            skipped += 1
            continue
        depth = depth_raw / 5000.0
        if k is None or k.width != rgb.shape[1] or k.height != rgb.shape[0]:
            h, w = rgb.shape[:2]
            if override is not None:
                k = CameraIntrinsics(fx=override[0], fy=override[1],
                                     cx=override[2], cy=override[3],
                                     width=w, height=h, depth_scale=5000.0)
            else:
                # freiburg1 defaults; close enough for the non-gating geometric run
                k = CameraIntrinsics(fx=517.3 * w / 640.0, fy=516.5 * h / 480.0,
                                     cx=318.6 * w / 640.0, cy=255.3 * h / 480.0,
                                     width=w, height=h, depth_scale=5000.0)
        frames.append(Frame(rgb=rgb, depth=depth, intrinsics=k, timestamp=t,
                            name=Path(rgb_name).stem))

    gt_path = root / "groundtruth.txt"
    gt_times, gt_poses = (None, None)
    if gt_path.exists():
        gt_times, gt_poses = _load_tum_groundtruth(gt_path)
    return frames, gt_times, gt_poses, skipped


def _load_tum_groundtruth(path: Path):
    """groundtruth.txt has free-running timestamps and qw-last quaternions."""
    from .geometry import quat_to_rotmat

    times, poses = [], []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 8:
            continue
        t, tx, ty, tz, qx, qy, qz, qw = vals
        q = np.array([qw, qx, qy, qz])
        n = np.linalg.norm(q)
        if n == 0:
            continue
        times.append(t)
        poses.append(PoseSE3(quat_to_rotmat(q / n), np.array([tx, ty, tz])))
    return np.asarray(times), poses


def write_tum_layout(frames: List[Frame], gt_poses, root, features: bool = True) -> int:
    """Materialize frames as a TUM-style directory (plus optional FSTF pyramids).

    Depth goes out as 16-bit PNG at 5000 units/m, so values round to 0.2 mm.
    Returns the number of frames written.
    """
    from PIL import Image

    from .tensorio import write_png, write_tensor, write_trajectory_tum

    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(exist_ok=True)
    if features:
        (root / "features").mkdir(exist_ok=True)

    rgb_lines, depth_lines = [], []
    for fr in frames:
        name = fr.name or f"frame_{len(rgb_lines):06d}"
        write_png(root / "rgb" / f"{name}.png", fr.rgb)
        raw = np.clip(np.round(fr.depth * 5000.0), 0, 65535).astype(np.uint16)
        Image.fromarray(raw).save(str(root / "depth" / f"{name}.png"))
        rgb_lines.append(f"{fr.timestamp:.6f} rgb/{name}.png")
        depth_lines.append(f"{fr.timestamp:.6f} depth/{name}.png")
        if features and fr.pyramid is not None:
            for lvl, tag in zip(fr.pyramid.levels(), ("16", "8", "4")):
                write_tensor(root / "features" / f"{name}_level{tag}.fstf",
                             lvl.astype(np.float32))
    (root / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (root / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    k = frames[0].intrinsics
    (root / "intrinsics.txt").write_text(f"{k.fx} {k.fy} {k.cx} {k.cy}\n")
    if gt_poses is not None:
        write_trajectory_tum(root / "groundtruth.txt",
                             [fr.timestamp for fr in frames], gt_poses)
    return len(rgb_lines)
