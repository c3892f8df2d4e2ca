"""Front-to-back alpha compositing over 16x16 tiles.

Each tile walks its depth-sorted splats once. Transmittance is accumulated with
a sequential running product; every ``checkpoint_interval``-th value is stored
so the backward pass can rebuild the full sequence in the identical
multiplication order (bit-exact, no approximation).

Tiles are independent, so the loop can fan out over worker threads; results
are merged in fixed tile order either way, keeping output deterministic.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..geometry import CameraIntrinsics, GaussianMap, PoseSE3
from .projection import (DEFAULT_CONFIG, ProjectionCache, RenderConfig, TileBins,
                         bin_tiles, project_map)


@dataclass
class TileRecord:
    tile_id: int
    px0: int
    py0: int
    width: int
    height: int
    crows: np.ndarray        # (M,) cache rows, composit order
    checkpoints: np.ndarray  # (pixels, ceil(M / P)) transmittance before splat k*P


@dataclass
class RenderOutput:
    color: Optional[np.ndarray] = None         # (H, W, 3)
    feature: Optional[np.ndarray] = None       # (H, W, D)
    depth_exp: Optional[np.ndarray] = None     # (H, W) alpha-weighted planar depth
    depth_median: Optional[np.ndarray] = None  # (H, W), 0 where nothing reaches 0.5
    alpha_acc: np.ndarray = None               # (H, W)
    transmittance: np.ndarray = None           # (H, W) residual after the last splat
    median_index: Optional[np.ndarray] = None  # (H, W) int64 map index, -1 none


@dataclass
class RenderRecording:
    """Everything the backward pass needs to replay compositing exactly."""

    cache: ProjectionCache
    bins: TileBins
    tiles: List[TileRecord]
    config: RenderConfig
    intrinsics: CameraIntrinsics
    median_index: Optional[np.ndarray] = None
    channels: Tuple[str, ...] = ()

    def contributions(self):
        """Yield (pixel_flat_index, map_index, alpha, transmittance) per tile.

        Pixel indices are row-major over the full image. Intended for
        inspection and tests; the optimizer consumes the recording directly.
        """
        for rec in self.tiles:
            alpha, trans, _ = replay_tile(self.cache, rec, self.config)
            us = rec.px0 + np.arange(rec.width)
            vs = rec.py0 + np.arange(rec.height)
            flat = (vs[:, None] * self.intrinsics.width + us[None, :]).reshape(-1)
            yield flat, self.cache.rows[rec.crows], alpha, trans


def _tile_pixels(rec: TileRecord) -> Tuple[np.ndarray, np.ndarray]:
    us = rec.px0 + np.arange(rec.width, dtype=np.float64)
    vs = rec.py0 + np.arange(rec.height, dtype=np.float64)
    uu, vv = np.meshgrid(us, vs)
    return uu.reshape(-1), vv.reshape(-1)


def _tile_alpha(cache: ProjectionCache, rec: TileRecord, cfg: RenderConfig):
    """Per-(pixel, splat) kernel values and alphas, plus pixel offsets dx, dy."""
    rows = rec.crows
    uu, vv = _tile_pixels(rec)
    dx = uu[:, None] - cache.mu2d[rows, 0][None, :]
    dy = vv[:, None] - cache.mu2d[rows, 1][None, :]
    ic = cache.icov2d[rows]
    rho2 = dx * dx * ic[:, 0, 0]
    tmp = dx * dy
    tmp *= 2.0 * ic[:, 0, 1]
    rho2 += tmp
    np.multiply(dy, dy, out=tmp)
    tmp *= ic[:, 1, 1]
    rho2 += tmp
    rho2 *= -0.5
    g = np.exp(rho2, out=rho2)
    alpha_raw = cache.opacity[rows][None, :] * g
    alpha = np.minimum(alpha_raw, cfg.alpha_clamp)
    return g, alpha_raw, alpha, (dx, dy)


def replay_tile(cache: ProjectionCache, rec: TileRecord, cfg: RenderConfig):
    """Recompute clamped alphas and checkpoint-reconstructed transmittances."""
    _, _, alpha, offs = _tile_alpha(cache, rec, cfg)
    trans = _reconstruct_transmittance(alpha, rec.checkpoints, cfg.checkpoint_interval)
    return alpha, trans, offs


def _forward_transmittance(alpha: np.ndarray, interval: int):
    """Running product T_i = prod_{j<i}(1 - alpha_j) plus block checkpoints."""
    acc = np.cumprod(1.0 - alpha, axis=1)
    trans = np.empty_like(alpha)
    trans[:, 0] = 1.0
    trans[:, 1:] = acc[:, :-1]
    checkpoints = trans[:, ::interval].copy()
    return trans, checkpoints


def _reconstruct_transmittance(alpha: np.ndarray, checkpoints: np.ndarray,
                               interval: int) -> np.ndarray:
    """Rebuild T from checkpoints with the forward pass's multiplication order."""
    npix, m = alpha.shape
    nblk = checkpoints.shape[1]
    pad = nblk * interval - m
    one_m = 1.0 - alpha
    if pad:
        one_m = np.concatenate([one_m, np.ones((npix, pad))], axis=1)
    blocks = np.empty((npix, nblk, interval))
    blocks[:, :, 0] = checkpoints
    om = one_m.reshape(npix, nblk, interval)
    for j in range(1, interval):
        blocks[:, :, j] = blocks[:, :, j - 1] * om[:, :, j - 1]
    trans = blocks.reshape(npix, nblk * interval)
    return trans[:, :m] if pad else trans


def _tile_records(bins: TileBins, k: CameraIntrinsics, cfg: RenderConfig) -> List[TileRecord]:
    ts = cfg.tile_size
    recs = []
    for tid in range(bins.tiles_x * bins.tiles_y):
        lo, hi = bins.tile_starts[tid], bins.tile_starts[tid + 1]
        if lo == hi:
            continue
        py0 = (tid // bins.tiles_x) * ts
        px0 = (tid % bins.tiles_x) * ts
        recs.append(TileRecord(tid, px0, py0, min(ts, k.width - px0),
                               min(ts, k.height - py0), bins.row_of_pair[lo:hi], None))
    return recs


def _forward_tile(cache: ProjectionCache, rec: TileRecord, cfg: RenderConfig,
                  wants: Tuple[bool, bool, bool, bool]) -> Dict[str, np.ndarray]:
    want_color, want_feat, want_depth, want_median = wants
    _, _, alpha, (dx, dy) = _tile_alpha(cache, rec, cfg)
    trans, rec.checkpoints = _forward_transmittance(alpha, cfg.checkpoint_interval)
    include = trans >= cfg.stop_transmittance
    wgt = alpha * trans
    wgt *= include
    one_m = 1.0 - alpha

    # product over included factors: include is a prefix, so it is either the
    # full running product or the T value at the first excluded column
    full = trans[:, -1] * one_m[:, -1]
    if include.all():
        residual = full
    else:
        cut = np.argmin(include, axis=1)
        residual = np.where(include[:, -1], full,
                            trans[np.arange(alpha.shape[0]), cut])
    out = {
        "alpha_acc": wgt.sum(axis=1),
        "transmittance": residual,
    }
    rows = rec.crows
    if want_color:
        out["color"] = wgt @ cache.color[rows]
    if want_feat:
        out["feature"] = wgt @ cache.latent[rows]
    if want_depth or want_median:
        beta = cache.beta[rows]
        dpair = beta[:, 0] * dx + beta[:, 1] * dy + beta[:, 2]
        if want_depth:
            out["depth_exp"] = (wgt * dpair).sum(axis=1)
        if want_median:
            t_after = trans * one_m
            hit = include & (t_after <= 0.5)
            any_hit = hit.any(axis=1)
            first = np.argmax(hit, axis=1)
            pix = np.nonzero(any_hit)[0]
            med = np.zeros(alpha.shape[0])
            med[pix] = dpair[pix, first[pix]]
            idx = np.full(alpha.shape[0], -1, dtype=np.int64)
            idx[pix] = cache.rows[rows[first[pix]]]
            out["depth_median"] = med
            out["median_index"] = idx
    return out


def run_tiles(fn, items, threads: int):
    """Apply fn over items, optionally on a thread pool; results in input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def render_frame(gmap: GaussianMap, pose: PoseSE3, k: CameraIntrinsics,
                 channels: Sequence[str] = ("color",),
                 cfg: RenderConfig = DEFAULT_CONFIG,
                 median_override: Optional[np.ndarray] = None,
                 record: bool = False):
    """Rasterize the map into the requested channels.

    channels: subset of {"color", "feature", "depth", "median"}. Accumulated
    opacity and residual transmittance always come back. ``median_override``
    (int64 (H, W), -1 for none) pins the median-depth splat selection to the
    given map indices instead of re-deriving it; used when probing losses
    around a fixed operating point.

    Returns RenderOutput, or (RenderOutput, RenderRecording) when ``record``.
    """
    if k.width * k.height > cfg.max_pixels:
        raise ValueError(f"image {k.width}x{k.height} exceeds pixel budget")
    channels = tuple(channels)
    wants = ("color" in channels, "feature" in channels,
             "depth" in channels, "median" in channels)
    h, w = k.height, k.width

    cache = project_map(gmap, pose, k, cfg)
    bins = bin_tiles(cache, k, cfg)
    tiles = _tile_records(bins, k, cfg)

    out = RenderOutput(alpha_acc=np.zeros((h, w)), transmittance=np.ones((h, w)))
    if wants[0]:
        out.color = np.zeros((h, w, 3))
    if wants[1]:
        out.feature = np.zeros((h, w, gmap.latent_dim))
    if wants[2]:
        out.depth_exp = np.zeros((h, w))
    if wants[3]:
        out.depth_median = np.zeros((h, w))
        out.median_index = np.full((h, w), -1, dtype=np.int64)

    results = run_tiles(lambda rec: _forward_tile(cache, rec, cfg, wants),
                        tiles, cfg.threads)
    for rec, res in zip(tiles, results):
        sl = np.s_[rec.py0:rec.py0 + rec.height, rec.px0:rec.px0 + rec.width]
        shp = (rec.height, rec.width)
        out.alpha_acc[sl] = res["alpha_acc"].reshape(shp)
        out.transmittance[sl] = res["transmittance"].reshape(shp)
        if wants[0]:
            out.color[sl] = res["color"].reshape(*shp, 3)
        if wants[1]:
            out.feature[sl] = res["feature"].reshape(*shp, -1)
        if wants[2]:
            out.depth_exp[sl] = res["depth_exp"].reshape(shp)
        if wants[3]:
            out.depth_median[sl] = res["depth_median"].reshape(shp)
            out.median_index[sl] = res["median_index"].reshape(shp)

    if wants[3] and median_override is not None:
        _apply_median_override(out, cache, median_override)

    if record:
        recording = RenderRecording(cache=cache, bins=bins, tiles=tiles, config=cfg,
                                    intrinsics=k, median_index=out.median_index,
                                    channels=channels)
        return out, recording
    return out


def _apply_median_override(out: RenderOutput, cache: ProjectionCache,
                           override: np.ndarray) -> None:
    """Replace the median selection with caller-pinned map indices."""
    h, w = override.shape
    out.median_index = override.copy()
    out.depth_median = np.zeros((h, w))
    vs, us = np.nonzero(override >= 0)
    if len(vs) == 0:
        return
    crow = cache.inv_index[override[vs, us]]
    ok = crow >= 0
    vs, us, crow = vs[ok], us[ok], crow[ok]
    beta = cache.beta[crow]
    dx = us - cache.mu2d[crow, 0]
    dy = vs - cache.mu2d[crow, 1]
    out.depth_median[vs, us] = beta[:, 0] * dx + beta[:, 1] * dy + beta[:, 2]


def composite_pixel(entries, cfg: RenderConfig = DEFAULT_CONFIG):
    """Reference single-pixel compositor over (alpha, color) pairs, front to back.

    Returns (color, alpha_acc, transmittance). Kept deliberately plain; the
    tiled path must agree with it.
    """
    color = np.zeros(3)
    trans = 1.0
    acc = 0.0
    for alpha, c in entries:
        if trans < cfg.stop_transmittance:
            break
        a = min(alpha, cfg.alpha_clamp)
        wgt = a * trans
        color = color + wgt * np.asarray(c, dtype=np.float64)
        acc += wgt
        trans *= 1.0 - a
    return color, acc, trans


def normals_from_depth(depth: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Per-pixel unit normals from a depth map by central differences.

    Back-projects the grid, differences along u and v, crosses them, and
    orients every normal toward the camera. Pixels with any invalid (<= 0)
    neighbor get a zero normal.
    """
    h, w = depth.shape
    pts = k.backproject_grid() * depth[..., None]
    valid = depth > 0.0

    du = np.zeros_like(pts)
    dv = np.zeros_like(pts)
    du[:, 1:-1] = 0.5 * (pts[:, 2:] - pts[:, :-2])
    dv[1:-1, :] = 0.5 * (pts[2:, :] - pts[:-2, :])

    ok = np.zeros((h, w), dtype=bool)
    ok[1:-1, 1:-1] = (valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2]
                      & valid[2:, 1:-1] & valid[:-2, 1:-1])

    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=2)
    ok &= norm > 1e-12
    n = np.where(ok[..., None], n / np.maximum(norm, 1e-12)[..., None], 0.0)

    flip = (n * pts).sum(axis=2) > 0.0
    n[flip] *= -1.0
    return n
