"""Camera tracking: feature-weighted generalized ICP against the splat map.

Source cloud comes from the frame's back-projected depth (voxel-thinned, with
codec-encoded feature vectors); the target is the current map's means with
their stored covariances and opacities. Alignment runs damped Gauss-Newton on
the pairwise Mahalanobis objective with per-pair weights

    w_i = alpha_match * exp(-gamma * ||f_src - f_match||^2)

over unit-normalized feature vectors. The feature factor is multiplicative: an
additive per-pair penalty is constant within an iteration and cannot steer the
pose update (kept behind ``additive_feature_term`` for comparison).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PoseSE3, pose_compose, rotation_angle, se3_exp

COV_EIG_FLOOR = 1e-3   # smallest eigenvalue after spectrum replacement


@dataclass
class TrackPoint:
    mu: np.ndarray        # (3,) meters
    cov: np.ndarray       # (3, 3) SPD
    latent: np.ndarray    # (D,)
    opacity: float = 1.0


class TrackCloud:
    """Column-wise cloud of TrackPoints."""

    def __init__(self, mu, cov, latent=None, opacity=None):
        self.mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
        n = len(self.mu)
        self.cov = np.asarray(cov, dtype=np.float64).reshape(n, 3, 3)
        self.latent = (np.zeros((n, 0)) if latent is None
                       else np.asarray(latent, dtype=np.float64).reshape(n, -1))
        self.opacity = (np.ones(n) if opacity is None
                        else np.asarray(opacity, dtype=np.float64).reshape(n))

    def __len__(self):
        return len(self.mu)

    def point(self, i: int) -> TrackPoint:
        return TrackPoint(self.mu[i].copy(), self.cov[i].copy(),
                          self.latent[i].copy(), float(self.opacity[i]))

    @classmethod
    def from_points(cls, pts: List[TrackPoint]) -> "TrackCloud":
        return cls(np.stack([p.mu for p in pts]), np.stack([p.cov for p in pts]),
                   np.stack([p.latent for p in pts]), np.array([p.opacity for p in pts]))


@dataclass
class TrackConfig:
    gamma: float = 10.0
    max_iter: int = 30
    max_corr_dist: float = 0.5       # meters
    min_inliers: int = 6
    additive_feature_term: bool = False
    knn: int = 20
    voxel: float = 0.025             # meters
    source_stride: int = 2           # pixel subsampling before backprojection
    tau_t: float = 0.05              # keyframe translation gate, meters
    tau_r_deg: float = 3.0           # keyframe rotation gate, degrees
    tau_sigma: float = 0.05          # keyframe residual gate, meters
    mapping_stride: int = 3          # every Nth keyframe also maps


@dataclass
class TrackResult:
    pose: PoseSE3
    rms_residual: float
    iterations: int
    inlier_count: int
    success: bool = True
    objective_trace: List[tuple] = field(default_factory=list)


def estimate_covariances(points: np.ndarray, k: int = 20) -> np.ndarray:
    """Per-point covariances with the eigenvalue spectrum forced to (eps, 1, 1).

    The raw k-NN scatter only supplies the eigenvectors; eigenvalues become
    (eps, 1, 1) scaled by the squared mean neighbor distance, so the smallest
    axis tracks the local surface normal and the result is always SPD. Clouds
    too small to supply k neighbors fall back to isotropic at local spacing.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n < 2:
        raise ValueError("need at least 2 points")
    if k < 3:
        raise ValueError("k must be >= 3")
    kk = min(k, n - 1)
    tree = cKDTree(pts)
    dist, idx = tree.query(pts, k=kk + 1)
    spacing = np.maximum(dist[:, 1:].mean(axis=1), 1e-9)

    if kk < k:
        return np.eye(3)[None] * (spacing**2)[:, None, None]

    nbrs = pts[idx[:, 1:]]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    scatter = np.einsum("nki,nkj->nij", centered, centered) / kk
    _, vecs = np.linalg.eigh(scatter)   # ascending: column 0 = normal direction
    lam = np.array([COV_EIG_FLOOR, 1.0, 1.0])
    out = np.einsum("nij,j,nkj->nik", vecs, lam, vecs)
    return out * (spacing**2)[:, None, None]


def voxel_downsample(mu: np.ndarray, voxel: float,
                     latent: Optional[np.ndarray] = None,
                     opacity: Optional[np.ndarray] = None):
    """One representative per occupied voxel: centroid, mean latent, max opacity."""
    if voxel <= 0:
        raise ValueError("voxel must be positive")
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
    n = len(mu)
    latent = np.zeros((n, 0)) if latent is None else np.asarray(latent, dtype=np.float64)
    opacity = np.ones(n) if opacity is None else np.asarray(opacity, dtype=np.float64)

    keys = np.floor(mu / voxel).astype(np.int64)
    uniq, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    m = len(uniq)
    cent = np.zeros((m, 3))
    np.add.at(cent, inv, mu)
    cent /= counts[:, None]
    lat = np.zeros((m, latent.shape[1]))
    if latent.shape[1]:
        np.add.at(lat, inv, latent)
        lat /= counts[:, None]
    op = np.zeros(m)
    np.maximum.at(op, inv, opacity)
    return cent, lat, op


def _unit_rows(f: np.ndarray) -> np.ndarray:
    if f.shape[1] == 0:
        return f
    n = np.linalg.norm(f, axis=1, keepdims=True)
    return f / np.where(n > 0, n, 1.0)


def _skew_batch(p: np.ndarray) -> np.ndarray:
    out = np.zeros((len(p), 3, 3))
    out[:, 0, 1] = -p[:, 2]
    out[:, 0, 2] = p[:, 1]
    out[:, 1, 0] = p[:, 2]
    out[:, 1, 2] = -p[:, 0]
    out[:, 2, 0] = -p[:, 1]
    out[:, 2, 1] = p[:, 0]
    return out


def _pair_objective(pose, src_mu, src_cov, tgt_mu, tgt_cov, w):
    """Frozen-correspondence weighted Mahalanobis objective and residuals."""
    R = pose.rotation
    p = pose.apply(src_mu)
    r = p - tgt_mu
    M = tgt_cov + np.einsum("ij,njk,lk->nil", R, src_cov, R)
    W = np.linalg.inv(M)
    e = float(np.einsum("n,ni,nij,nj->", w, r, W, r))
    return e, p, r, W


def feature_gicp_align(source: TrackCloud, target: TrackCloud, init: PoseSE3,
                       cfg: TrackConfig = TrackConfig()) -> TrackResult:
    """Weighted GICP pose refinement; source is mapped into the target frame.

    Each iteration freezes nearest-neighbor correspondences and weights, then
    takes a Gauss-Newton step, escalating Levenberg damping until the frozen
    objective does not increase. Fewer than ``min_inliers`` pairs in range is
    a tracking failure and returns the last pose with ``success=False``.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("source and target must be non-empty")
    tree = cKDTree(target.mu)
    fs = _unit_rows(source.latent)
    ft = _unit_rows(target.latent)
    both_feats = fs.shape[1] > 0 and fs.shape[1] == ft.shape[1]

    pose = init
    steps_taken = []
    iterations = 0
    for _ in range(cfg.max_iter):
        p = pose.apply(source.mu)
        dist, j = tree.query(p)
        inlier = dist <= cfg.max_corr_dist
        n_in = int(inlier.sum())
        if n_in < cfg.min_inliers:
            return TrackResult(pose, float("inf"), iterations, n_in, success=False,
                               objective_trace=steps_taken)
        src_mu = source.mu[inlier]
        src_cov = source.cov[inlier]
        jj = j[inlier]
        tgt_mu = target.mu[jj]
        tgt_cov = target.cov[jj]

        if both_feats and cfg.gamma > 0 and not cfg.additive_feature_term:
            df = np.exp(-cfg.gamma * ((fs[inlier] - ft[jj]) ** 2).sum(axis=1))
        else:
            df = np.ones(n_in)
        w = target.opacity[jj] * df

        e0, p_in, r, W = _pair_objective(pose, src_mu, src_cov, tgt_mu, tgt_cov, w)

        A = -_skew_batch(p_in)
        WA = np.einsum("nij,njk->nik", W, A)
        Wr = np.einsum("nij,nj->ni", W, r)
        H = np.zeros((6, 6))
        H[:3, :3] = np.einsum("n,nji,njk->ik", w, A, WA)
        H[:3, 3:] = np.einsum("n,nji->ij", w, WA)
        H[3:, :3] = H[:3, 3:].T
        H[3:, 3:] = np.einsum("n,nij->ij", w, W)
        g = np.concatenate([np.einsum("n,nji,nj->i", w, A, Wr),
                            np.einsum("n,ni->i", w, Wr)])

        scale = max(np.trace(H) / 6.0, 1e-12)
        lam = 0.0
        solve_failures = 0
        accepted = None
        for _attempt in range(10):
            try:
                delta = np.linalg.solve(H + lam * scale * np.eye(6), -g)
            except np.linalg.LinAlgError:
                solve_failures += 1
                if solve_failures > 1:
                    return TrackResult(pose, float("inf"), iterations, n_in,
                                       success=False, objective_trace=steps_taken)
                lam = max(lam * 10.0, 1e-6)
                continue
            if not np.all(np.isfinite(delta)):
                lam = max(lam * 10.0, 1e-6)
                continue
            cand = pose_compose(se3_exp(delta), pose)
            e1, _, _, _ = _pair_objective(cand, src_mu, src_cov, tgt_mu, tgt_cov, w)
            if e1 <= e0 * (1.0 + 1e-12) + 1e-15:
                accepted = (cand, delta, e1)
                break
            lam = max(lam * 10.0, 1e-6)
        iterations += 1
        if accepted is None:
            break   # no descent direction left; treat as converged
        pose, delta, e1 = accepted
        steps_taken.append((e0, e1))
        if np.linalg.norm(delta) < 1e-6:
            break

    # final statistics under the converged pose
    p = pose.apply(source.mu)
    dist, j = tree.query(p)
    inlier = dist <= cfg.max_corr_dist
    n_in = int(inlier.sum())
    if n_in == 0:
        return TrackResult(pose, float("inf"), iterations, 0, success=False,
                           objective_trace=steps_taken)
    jj = j[inlier]
    if both_feats and cfg.gamma > 0 and not cfg.additive_feature_term:
        df = np.exp(-cfg.gamma * ((fs[inlier] - ft[jj]) ** 2).sum(axis=1))
    else:
        df = np.ones(n_in)
    w = target.opacity[jj] * df
    r2 = ((p[inlier] - target.mu[jj]) ** 2).sum(axis=1)
    rms = float(np.sqrt((w * r2).sum() / max(w.sum(), 1e-12)))
    return TrackResult(pose, rms, iterations, n_in,
                       success=n_in >= cfg.min_inliers, objective_trace=steps_taken)


def keyframe_decision(current: PoseSE3, last_kf: PoseSE3, rms: float,
                      cfg: TrackConfig = TrackConfig(), kf_count: int = 0) -> str:
    """Gate on motion/residual; every ``mapping_stride``-th keyframe also maps."""
    trans = float(np.linalg.norm(current.translation - last_kf.translation))
    ang = rotation_angle(current.rotation @ last_kf.rotation.T)
    if trans > cfg.tau_t or ang > np.deg2rad(cfg.tau_r_deg) or rms > cfg.tau_sigma:
        return "mapping_kf" if kf_count % cfg.mapping_stride == 0 else "tracking_kf"
    return "none"


def source_cloud_from_frame(frame, codec=None, cfg: TrackConfig = TrackConfig()) -> TrackCloud:
    """Back-project valid depth into a camera-frame TrackCloud.

    Pixels are strided, voxel-thinned, then given k-NN covariances. Feature
    vectors are pyramid samples pushed through the codec encoder; without a
    pyramid or codec the cloud carries zero-width latents (feature weighting
    then degenerates to plain GICP).
    """
    from .features import sample_pyramid_batch

    k = frame.intrinsics
    s = max(1, cfg.source_stride)
    depth = frame.depth[::s, ::s]
    valid = depth > 0
    rays = k.backproject_grid()[::s, ::s]
    pts = (rays * depth[..., None])[valid]
    if len(pts) == 0:
        raise ValueError("frame has no valid depth")

    vv, uu = np.nonzero(valid)
    if frame.pyramid is not None and codec is not None:
        xy = np.stack([uu * s, vv * s], axis=1).astype(np.float64)
        raw = sample_pyramid_batch(frame.pyramid, xy, (k.width, k.height))
        latent = codec.encode(raw)
    else:
        latent = np.zeros((len(pts), 0))

    mu, lat, op = voxel_downsample(pts, cfg.voxel, latent, np.ones(len(pts)))
    cov = estimate_covariances(mu, cfg.knn)
    return TrackCloud(mu, cov, lat, op)


def target_cloud_from_map(gmap) -> TrackCloud:
    """Map means with their stored covariances, opacities, and latents."""
    if len(gmap) == 0:
        raise ValueError("map is empty")
    return TrackCloud(gmap.mu.copy(), gmap.covariances(), gmap.latent.copy(),
                      gmap.opacity.copy())
