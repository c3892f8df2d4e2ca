"""Perspective projection of splats: 2D footprints, per-splat planar depth, tile bins.

The camera looks down +z in its own frame. ``pose`` below is always the stored
world-from-camera transform; its inverse maps world points into the camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..geometry import CameraIntrinsics, GaussianMap, PoseSE3, covariances_from_factors


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 16
    near_plane: float = 0.01          # meters
    dilation: float = 0.3             # px^2 added to cov2d diagonal
    alpha_clamp: float = 0.99
    stop_transmittance: float = 1e-4
    footprint_sigma: float = 3.0      # binning radius in units of sqrt(max eigenvalue)
    checkpoint_interval: int = 32     # splats per transmittance checkpoint block
    max_pixels: int = 4_000_000
    planar_cond_limit: float = 1e8    # covariance condition number before frontal fallback
    frustum_margin_deg: float = 5.0   # guard band beyond the FOV cone before culling
    threads: int = 1                  # worker threads for the tile loops


DEFAULT_CONFIG = RenderConfig()


@dataclass
class ProjectedGaussian:
    """Single-splat projection record (contract surface; bulk path uses arrays)."""

    mu2d: np.ndarray          # (2,) pixels
    cov2d: np.ndarray         # (2, 2) pixels^2, dilated
    depth_coeffs: np.ndarray  # (a, b, mu_z)
    view_depth: float         # camera-frame z, meters
    source_index: int


@dataclass
class ProjectionCache:
    """Vectorized projection of every kept (non-culled) splat plus intermediates.

    ``rows`` maps cache row -> original map index; ``inv_index`` is the reverse
    (-1 for culled). The intermediates are retained for the backward pass.
    """

    rows: np.ndarray          # (K,) int64 original indices
    inv_index: np.ndarray     # (N,) int64 cache row or -1
    mu_cam: np.ndarray        # (K, 3)
    sigma_cam: np.ndarray     # (K, 3, 3)
    jac: np.ndarray           # (K, 2, 3) pinhole Jacobian
    mu2d: np.ndarray          # (K, 2)
    cov2d: np.ndarray         # (K, 2, 2)
    icov2d: np.ndarray        # (K, 2, 2)
    beta: np.ndarray          # (K, 3) planar depth coefficients (a, b, mu_z)
    inv_sigma_cam: np.ndarray  # (K, 3, 3)
    sig_mu: np.ndarray        # (K, 3) Sigma^-1 mu
    quad: np.ndarray          # (K,) mu^T Sigma^-1 mu
    radius: np.ndarray        # (K,) binning radius, pixels
    color: np.ndarray         # (K, 3)
    latent: np.ndarray        # (K, D)
    opacity: np.ndarray       # (K,)
    raw_scales: np.ndarray = None  # (K, 3) map scales, for the factor chain
    raw_quat: np.ndarray = None    # (K, 4) map quaternions as stored
    planar_bad: np.ndarray = None  # (K,) bool, frontal-plane fallback applied
    r_cw: np.ndarray = field(default_factory=lambda: np.eye(3))

    @property
    def planar_fallbacks(self) -> int:
        return int(self.planar_bad.sum())


def project_map(gmap: GaussianMap, pose: PoseSE3, k: CameraIntrinsics,
                cfg: RenderConfig = DEFAULT_CONFIG) -> ProjectionCache:
    """Project all map splats, culling behind-camera and fully off-image ones."""
    n = len(gmap)
    r_cw = pose.rotation.T
    t_cw = -r_cw @ pose.translation
    mu_cam_all = gmap.mu @ r_cw.T + t_cw

    keep = mu_cam_all[:, 2] > cfg.near_plane
    rows = np.nonzero(keep)[0]
    mu_cam = mu_cam_all[rows]

    # Guard-band frustum cull. Splats barely past the near plane but far off
    # axis would otherwise get near-singular Jacobians and screen footprints
    # that swallow the whole image.
    cx_edge = (np.array([-0.5, k.width - 0.5]) - k.cx) / k.fx
    cy_edge = (np.array([-0.5, k.height - 0.5]) - k.cy) / k.fy
    half_diag = np.arctan(np.hypot(np.abs(cx_edge).max(), np.abs(cy_edge).max()))
    dist = np.maximum(np.linalg.norm(mu_cam, axis=1), 1e-12)
    view_angle = np.arccos(np.clip(mu_cam[:, 2] / dist, -1.0, 1.0))
    ang_radius = np.arcsin(np.clip(
        cfg.footprint_sigma * gmap.scales[rows].max(axis=1) / dist, 0.0, 1.0))
    inside = view_angle <= half_diag + ang_radius + np.deg2rad(cfg.frustum_margin_deg)
    rows = rows[inside]
    mu_cam = mu_cam[inside]
    z = mu_cam[:, 2]

    sigma_w = covariances_from_factors(gmap.scales[rows], gmap.quat[rows])
    sigma_cam = np.einsum("ij,njk,lk->nil", r_cw, sigma_w, r_cw)

    fx, fy = k.fx, k.fy
    x, y = mu_cam[:, 0], mu_cam[:, 1]
    mu2d = np.stack([fx * x / z + k.cx, fy * y / z + k.cy], axis=1)

    jac = np.zeros((len(rows), 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / z**2
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / z**2

    cov2d = np.einsum("nij,njk,nlk->nil", jac, sigma_cam, jac)
    cov2d[:, 0, 0] += cfg.dilation
    cov2d[:, 1, 1] += cfg.dilation

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    icov2d = np.empty_like(cov2d)
    icov2d[:, 0, 0] = cov2d[:, 1, 1] / det
    icov2d[:, 1, 1] = cov2d[:, 0, 0] / det
    icov2d[:, 0, 1] = -cov2d[:, 0, 1] / det
    icov2d[:, 1, 0] = -cov2d[:, 1, 0] / det

    # 3-sigma footprint radius from the larger cov2d eigenvalue
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid**2 - det, 0.0))
    radius = cfg.footprint_sigma * np.sqrt(lam_max)

    on_image = ((mu2d[:, 0] + radius >= 0) & (mu2d[:, 0] - radius <= k.width - 1)
                & (mu2d[:, 1] + radius >= 0) & (mu2d[:, 1] - radius <= k.height - 1))
    sub = np.nonzero(on_image)[0]
    rows = rows[sub]
    mu_cam, sigma_cam, mu2d = mu_cam[sub], sigma_cam[sub], mu2d[sub]
    jac, cov2d, icov2d, radius = jac[sub], cov2d[sub], icov2d[sub], radius[sub]
    z = mu_cam[:, 2]

    inv_sigma = np.linalg.inv(sigma_cam)
    sig_mu = np.einsum("nij,nj->ni", inv_sigma, mu_cam)
    quad = np.einsum("ni,ni->n", mu_cam, sig_mu)

    # planar depth: first-order expansion of the along-ray density argmax
    beta = np.zeros((len(rows), 3))
    beta[:, 2] = z
    with np.errstate(divide="ignore", invalid="ignore"):
        beta[:, 0] = -z**2 * sig_mu[:, 0] / (fx * quad)
        beta[:, 1] = -z**2 * sig_mu[:, 1] / (fy * quad)
    scales_kept = gmap.scales[rows]
    cond = (scales_kept.max(axis=1) / scales_kept.min(axis=1)) ** 2
    bad = (cond > cfg.planar_cond_limit) | ~np.isfinite(beta[:, 0]) | ~np.isfinite(beta[:, 1])
    beta[bad, 0] = 0.0
    beta[bad, 1] = 0.0

    inv_index = np.full(n, -1, dtype=np.int64)
    inv_index[rows] = np.arange(len(rows))

    return ProjectionCache(
        rows=rows, inv_index=inv_index, mu_cam=mu_cam, sigma_cam=sigma_cam, jac=jac,
        mu2d=mu2d, cov2d=cov2d, icov2d=icov2d, beta=beta, inv_sigma_cam=inv_sigma,
        sig_mu=sig_mu, quad=quad, radius=radius,
        color=gmap.color[rows].copy(), latent=gmap.latent[rows].copy(),
        opacity=gmap.opacity[rows].copy(), raw_scales=gmap.scales[rows].copy(),
        raw_quat=gmap.quat[rows].copy(), planar_bad=bad, r_cw=r_cw,
    )


def project_gaussian(g, pose: PoseSE3, k: CameraIntrinsics,
                     cfg: RenderConfig = DEFAULT_CONFIG) -> Optional[ProjectedGaussian]:
    """Project one splat; returns None when culled."""
    gmap = GaussianMap(latent_dim=len(g.latent))
    gmap.append(g.mu[None], g.scales[None], g.rot[None], g.color[None],
                np.array([g.opacity]), g.latent[None])
    cache = project_map(gmap, pose, k, cfg)
    if len(cache.rows) == 0:
        return None
    return ProjectedGaussian(mu2d=cache.mu2d[0], cov2d=cache.cov2d[0],
                             depth_coeffs=cache.beta[0],
                             view_depth=float(cache.mu_cam[0, 2]), source_index=0)


def planar_depth_coeffs(g, pose: PoseSE3, k: CameraIntrinsics,
                        cfg: RenderConfig = DEFAULT_CONFIG) -> np.ndarray:
    """(a, b, mu_z) for one splat; requires it not to be culled."""
    proj = project_gaussian(g, pose, k, cfg)
    if proj is None:
        raise ValueError("gaussian is culled from this view")
    return proj.depth_coeffs


@dataclass
class TileBins:
    """Sorted (tile, splat) incidence produced by conservative 3-sigma rectangles."""

    tiles_x: int
    tiles_y: int
    tile_of_pair: np.ndarray   # (P,) sorted ascending
    row_of_pair: np.ndarray    # (P,) cache row per pair, depth-then-index sorted per tile
    tile_starts: np.ndarray    # (tiles+1,) slice boundaries into the pair arrays


def bin_tiles(cache: ProjectionCache, k: CameraIntrinsics,
              cfg: RenderConfig = DEFAULT_CONFIG) -> TileBins:
    ts = cfg.tile_size
    tiles_x = -(-k.width // ts)
    tiles_y = -(-k.height // ts)
    n_tiles = tiles_x * tiles_y
    K = len(cache.rows)
    if K == 0:
        return TileBins(tiles_x, tiles_y, np.zeros(0, np.int64), np.zeros(0, np.int64),
                        np.zeros(n_tiles + 1, np.int64))

    x, y = cache.mu2d[:, 0], cache.mu2d[:, 1]
    r = cache.radius
    tx0 = np.clip(np.floor((x - r) / ts).astype(np.int64), 0, tiles_x - 1)
    tx1 = np.clip(np.floor((x + r) / ts).astype(np.int64), 0, tiles_x - 1)
    ty0 = np.clip(np.floor((y - r) / ts).astype(np.int64), 0, tiles_y - 1)
    ty1 = np.clip(np.floor((y + r) / ts).astype(np.int64), 0, tiles_y - 1)
    span_x = tx1 - tx0 + 1
    span_y = ty1 - ty0 + 1
    counts = span_x * span_y

    total = int(counts.sum())
    gauss_rep = np.repeat(np.arange(K, dtype=np.int64), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    sx = np.repeat(span_x, counts)
    tx = np.repeat(tx0, counts) + local % sx
    ty = np.repeat(ty0, counts) + local // sx
    tile = ty * tiles_x + tx

    depth_rep = cache.mu_cam[gauss_rep, 2]
    src_rep = cache.rows[gauss_rep]
    order = np.lexsort((src_rep, depth_rep, tile))
    tile_sorted = tile[order]
    row_sorted = gauss_rep[order]

    tile_starts = np.searchsorted(tile_sorted, np.arange(n_tiles + 1))
    return TileBins(tiles_x, tiles_y, tile_sorted, row_sorted, tile_starts)
