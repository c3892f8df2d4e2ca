"""Rigid-body math on SE(3), camera intrinsics and the shared scene types.

Poses are stored world-from-camera. Rotations live as 3x3 orthonormal matrices;
tangent vectors are ordered (omega, v) with omega in radians and v in meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

_EPS_ANGLE = 1e-8          # below this, trig terms use their Taylor series
_ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Raised for invalid geometric inputs (non-finite, non-orthonormal...)."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def skew(w) -> np.ndarray:
    """3x3 cross-product matrix of a 3-vector."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' rotation from an axis-angle 3-vector."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    S = skew(omega)
    if theta < _EPS_ANGLE:
        # sin(t)/t ~ 1 - t^2/6, (1-cos t)/t^2 ~ 1/2 - t^2/24
        return np.eye(3) + (1.0 - theta**2 / 6.0) * S + (0.5 - theta**2 / 24.0) * (S @ S)
    return np.eye(3) + (np.sin(theta) / theta) * S + ((1.0 - np.cos(theta)) / theta**2) * (S @ S)


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix, stable at all angles.

    Shepperd's method: pick the largest of the four squared components from the
    diagonal, which keeps the extraction well conditioned near pi.
    """
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    cand = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    case = int(np.argmax(cand))
    if case == 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif case == 1:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif case == 2:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a quaternion (w, x, y, z); normalizes internally."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle of a rotation matrix on the principal branch.

    Goes through the quaternion so the symmetric-matrix information is used
    when the angle is near pi (where R - R^T loses the axis).
    """
    q = rotmat_to_quat(R)
    w = q[0]
    v = q[1:]
    nv = float(np.linalg.norm(v))
    if nv < _EPS_ANGLE:
        # theta ~ 2*nv/w; axis*theta ~ 2*v/w * (1 - nv^2/(3 w^2))
        return 2.0 * v / w * (1.0 - nv * nv / (3.0 * w * w)) if w != 0 else np.zeros(3)
    theta = 2.0 * np.arctan2(nv, w)
    return v / nv * theta


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    S = skew(omega)
    if theta < _EPS_ANGLE:
        return np.eye(3) + (0.5 - theta**2 / 24.0) * S + (1.0 / 6.0 - theta**2 / 120.0) * (S @ S)
    A = (1.0 - np.cos(theta)) / theta**2
    B = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + A * S + B * (S @ S)


def _left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    S = skew(omega)
    if theta < _EPS_ANGLE:
        return np.eye(3) - 0.5 * S + (1.0 / 12.0 + theta**2 / 720.0) * (S @ S)
    cot = theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))
    return np.eye(3) - 0.5 * S + ((1.0 - cot) / theta**2) * (S @ S)


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform (R, t); immutable, arrays are read-only views."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise GeometryError("non-finite pose")
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > 1e-6:
            raise GeometryError(f"rotation not orthonormal (|R^T R - I|_max = {err:.3e})")
        if err > _ORTHO_TOL:
            # drift within 1e-6: snap to the nearest orthogonal matrix
            R = nearest_rotation(R)
        if np.linalg.det(R) < 0:
            raise GeometryError("rotation has det -1 (reflection)")
        object.__setattr__(self, "rotation", _readonly(R))
        object.__setattr__(self, "translation", _readonly(t))

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "PoseSE3":
        Rt = self.rotation.T
        return PoseSE3(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (..., 3) points."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def __mul__(self, other: "PoseSE3") -> "PoseSE3":
        return pose_compose(self, other)


def pose_compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """(R_a R_b, R_a t_b + t_a)."""
    return PoseSE3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Nearest orthogonal matrix with det +1 (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U = U.copy()
        U[:, -1] = -U[:, -1]
        R = U @ Vt
    return R


def se3_exp(xi: np.ndarray) -> PoseSE3:
    """Exponential map; xi = (omega, v)."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise GeometryError(f"non-finite tangent vector: {xi}")
    omega, v = xi[:3], xi[3:]
    return PoseSE3(so3_exp(omega), _left_jacobian(omega) @ v)


def se3_log(T: PoseSE3) -> np.ndarray:
    """Inverse of se3_exp on the principal branch (rotation angle <= pi)."""
    omega = so3_log(T.rotation)
    v = _left_jacobian_inv(omega) @ T.translation
    return np.concatenate([omega, v])


def rotation_angle(R: np.ndarray) -> float:
    """Angle of rotation in radians, in [0, pi]."""
    c = (np.trace(R) - 1.0) * 0.5
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; depth_scale divides raw sensor units into meters."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (self.width >= 1 and self.height >= 1):
            raise GeometryError("image size must be >= 1")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def backproject_grid(self) -> np.ndarray:
        """(H, W, 3) unit-depth rays ((u-cx)/fx, (v-cy)/fy, 1)."""
        u = (np.arange(self.width) - self.cx) / self.fx
        v = (np.arange(self.height) - self.cy) / self.fy
        rays = np.empty((self.height, self.width, 3))
        rays[..., 0] = u[None, :]
        rays[..., 1] = v[:, None]
        rays[..., 2] = 1.0
        return rays


def covariance_from_factors(scales: np.ndarray, quat: np.ndarray) -> np.ndarray:
    """Sigma = R(q) diag(s^2) R(q)^T for one splat; SPD for positive scales."""
    R = quat_to_rotmat(quat)
    return (R * (np.asarray(scales, dtype=np.float64) ** 2)) @ R.T


@dataclass
class Gaussian:
    """One anisotropic splat; covariance is kept factored as (scales, rot)."""

    mu: np.ndarray                # (3,) world position, meters
    scales: np.ndarray            # (3,) std-dev along local axes, meters, > 0
    rot: np.ndarray               # (4,) unit quaternion (w, x, y, z)
    color: np.ndarray             # (3,) in [0, 1]
    opacity: float                # in (0, 1)
    latent: np.ndarray            # (D,) feature embedding
    insertion_round: int = 0

    def covariance(self) -> np.ndarray:
        return covariance_from_factors(self.scales, self.rot)

    def validate(self):
        if not np.all(np.asarray(self.scales) > 0):
            raise GeometryError("scales must be positive")
        if not (0.0 < self.opacity < 1.0):
            raise GeometryError("opacity must lie in (0, 1)")
        if abs(np.linalg.norm(self.rot) - 1.0) > 1e-9:
            raise GeometryError("quaternion must be unit norm")


class GaussianMap:
    """World-frame splat collection stored as arrays (one row per Gaussian).

    Indices are stable within one generation; structural edits (insert/prune)
    bump ``generation``.
    """

    def __init__(self, latent_dim: int = 24, scene_extent: float = 1.0):
        if scene_extent <= 0:
            raise GeometryError("scene_extent must be positive")
        self.latent_dim = int(latent_dim)
        self.scene_extent = float(scene_extent)
        self.generation = 0
        self.mu = np.zeros((0, 3))
        self.scales = np.zeros((0, 3))
        self.quat = np.zeros((0, 4))
        self.color = np.zeros((0, 3))
        self.opacity = np.zeros((0,))
        self.latent = np.zeros((0, self.latent_dim))
        self.insertion_round = np.zeros((0,), dtype=np.int64)

    def __len__(self) -> int:
        return self.mu.shape[0]

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.mu[i].copy(), self.scales[i].copy(), self.quat[i].copy(),
                        self.color[i].copy(), float(self.opacity[i]), self.latent[i].copy(),
                        int(self.insertion_round[i]))

    def append(self, mu, scales, quat, color, opacity, latent, insertion_round=0):
        """Append a block of Gaussians given as (N, ...) arrays; bumps generation."""
        n = len(mu)
        self.mu = np.concatenate([self.mu, np.reshape(mu, (n, 3))])
        self.scales = np.concatenate([self.scales, np.reshape(scales, (n, 3))])
        q = np.reshape(quat, (n, 4))
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        self.quat = np.concatenate([self.quat, q])
        self.color = np.concatenate([self.color, np.reshape(color, (n, 3))])
        self.opacity = np.concatenate([self.opacity, np.reshape(opacity, (n,))])
        self.latent = np.concatenate([self.latent, np.reshape(latent, (n, self.latent_dim))])
        rounds = np.full((n,), insertion_round, dtype=np.int64) if np.isscalar(insertion_round) \
            else np.asarray(insertion_round, dtype=np.int64)
        self.insertion_round = np.concatenate([self.insertion_round, rounds])
        self.generation += 1

    def keep(self, mask: np.ndarray):
        """Drop rows where mask is False; bumps generation."""
        mask = np.asarray(mask, dtype=bool)
        self.mu = self.mu[mask]
        self.scales = self.scales[mask]
        self.quat = self.quat[mask]
        self.color = self.color[mask]
        self.opacity = self.opacity[mask]
        self.latent = self.latent[mask]
        self.insertion_round = self.insertion_round[mask]
        self.generation += 1

    def copy(self) -> "GaussianMap":
        m = GaussianMap(self.latent_dim, self.scene_extent)
        m.generation = self.generation
        for name in ("mu", "scales", "quat", "color", "opacity", "latent", "insertion_round"):
            setattr(m, name, getattr(self, name).copy())
        return m

    def covariances(self) -> np.ndarray:
        """(N, 3, 3) world covariances from the factored storage."""
        return covariances_from_factors(self.scales, self.quat)

    def normalize_rotations(self):
        n = np.linalg.norm(self.quat, axis=1, keepdims=True)
        self.quat = self.quat / np.where(n > 0, n, 1.0)

    def snapshot(self) -> "GaussianMap":
        """Immutable-by-convention copy published to the tracker."""
        return self.copy()


def quats_to_rotmats(q: np.ndarray) -> np.ndarray:
    """(N, 4) quaternions -> (N, 3, 3) rotation matrices; normalizes internally."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariances_from_factors(scales: np.ndarray, quat: np.ndarray) -> np.ndarray:
    """(N, 3, 3) Sigma = R diag(s^2) R^T, vectorized."""
    R = quats_to_rotmats(quat)
    s2 = np.asarray(scales, dtype=np.float64) ** 2
    return np.einsum("nij,nj,nkj->nik", R, s2, R)


@dataclass
class FeaturePyramid:
    """Three activation maps at strides 16/8/4 with channels 256/64/32."""

    level16: np.ndarray   # (H/16, W/16, 256)
    level8: np.ndarray    # (H/8, W/8, 64)
    level4: np.ndarray    # (H/4, W/4, 32)

    CHANNELS = (256, 64, 32)
    STRIDES = (16, 8, 4)

    def levels(self):
        return (self.level16, self.level8, self.level4)

    def validate(self):
        for lvl, ch in zip(self.levels(), self.CHANNELS):
            if lvl.ndim != 3 or lvl.shape[2] != ch:
                raise GeometryError(f"pyramid level has shape {lvl.shape}, wanted (*, *, {ch})")
            if not np.all(np.isfinite(lvl)):
                raise GeometryError("pyramid contains non-finite values")


def pyramid_shapes(width: int, height: int):
    """Level grid sizes (w, h) per stride, rounded up (640x640 -> 40/80/160 ... etc.)."""
    return [(-(-width // s), -(-height // s)) for s in FeaturePyramid.STRIDES]


@dataclass
class Frame:
    """One RGB-D observation plus bookkeeping filled in by the pipeline."""

    rgb: np.ndarray                 # (H, W, 3) in [0, 1]
    depth: np.ndarray               # (H, W) meters, 0 = invalid
    intrinsics: CameraIntrinsics
    timestamp: float = 0.0
    pyramid: Optional[FeaturePyramid] = None
    pose: Optional[PoseSE3] = None  # world-from-camera
    class_ids: Optional[np.ndarray] = None  # synthetic ground truth, (H, W) int
    name: str = ""                  # source image stem, keys external feature files

    def validate(self):
        if self.rgb.min() < 0 or self.rgb.max() > 1:
            raise GeometryError("rgb must lie in [0, 1]")
        if self.depth.min() < 0:
            raise GeometryError("depth must be non-negative")

    def valid_depth_mask(self) -> np.ndarray:
        return self.depth > 0
