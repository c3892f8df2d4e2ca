"""Trajectory and image evaluation: ATE, PSNR/SSIM/depth error, class mIoU."""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from .losses import ssim

PSNR_SENTINEL = 99.0


def associate_timestamps(t_a: np.ndarray, t_b: np.ndarray, tol: float = 0.02):
    """Greedy nearest-timestamp pairing; returns index pairs within tol."""
    pairs = []
    used = np.zeros(len(t_b), dtype=bool)
    for i, t in enumerate(t_a):
        if len(t_b) == 0:
            break
        j = int(np.argmin(np.abs(t_b - t)))
        if not used[j] and abs(t_b[j] - t) <= tol:
            used[j] = True
            pairs.append((i, j))
    return pairs


def rigid_align(src: np.ndarray, dst: np.ndarray):
    """Least-squares rigid (R, t) taking src onto dst; scale fixed to 1."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    t = mu_d - R @ mu_s
    return R, t


def ate_rmse(est: Sequence, gt: Sequence, est_times=None, gt_times=None,
             tol: float = 0.02) -> float:
    """RMSE of translational residuals after rigid alignment of the estimate.

    est/gt are pose sequences (PoseSE3 or (N, 3) translation arrays). When
    timestamps are given the sequences are associated first; otherwise they
    must have equal length. Fewer than 3 matches is an error.
    """
    p_est = _translations(est)
    p_gt = _translations(gt)
    if est_times is not None and gt_times is not None:
        pairs = associate_timestamps(np.asarray(est_times), np.asarray(gt_times), tol)
        if len(pairs) < 3:
            raise ValueError(f"only {len(pairs)} matched timestamps")
        ia = [a for a, _ in pairs]
        ib = [b for _, b in pairs]
        p_est, p_gt = p_est[ia], p_gt[ib]
    elif len(p_est) != len(p_gt):
        raise ValueError("trajectory lengths differ and no timestamps given")
    if len(p_est) < 3:
        raise ValueError("need at least 3 poses")
    R, t = rigid_align(p_est, p_gt)
    res = p_gt - (p_est @ R.T + t)
    return float(np.sqrt(np.mean(np.sum(res**2, axis=1))))


def _translations(poses) -> np.ndarray:
    arr = []
    for p in poses:
        arr.append(p.translation if hasattr(p, "translation") else np.asarray(p))
    return np.asarray(arr, dtype=np.float64).reshape(-1, 3)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for [0,1] images, capped at the 99 dB sentinel."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_SENTINEL))


def image_metrics(render, frame) -> Tuple[float, float, float]:
    """(psnr dB, ssim, depth_l1 meters) against the observation.

    depth_l1 compares the expected-depth channel over valid (nonzero) observed
    depth; NaN when either depth is unavailable.
    """
    rgb = np.clip(render.color, 0.0, 1.0)
    if rgb.shape != frame.rgb.shape:
        raise ValueError("shape mismatch")
    p = psnr(rgb, frame.rgb)
    s = ssim(rgb, frame.rgb)
    d = float("nan")
    if render.depth_exp is not None and frame.depth is not None:
        valid = frame.depth > 0
        if valid.any():
            d = float(np.mean(np.abs(render.depth_exp[valid] - frame.depth[valid])))
    return p, s, d


def miou_eval(rendered_latents: np.ndarray, codec, class_codes: np.ndarray,
              gt_class_ids: np.ndarray) -> Tuple[float, float]:
    """Decode the rendered latent map and score nearest-code class labels.

    Pixels with gt id < 0 (nothing rendered) are ignored. Classes absent from
    both prediction and ground truth drop out of the mean IoU.
    """
    h, w, _ = rendered_latents.shape
    if gt_class_ids.shape != (h, w):
        raise ValueError("gt shape mismatch")
    flat = rendered_latents.reshape(h * w, -1)
    decoded = np.concatenate(codec.decode(flat), axis=1) if codec is not None else flat
    codes = np.asarray(class_codes, dtype=np.float64)

    dn = decoded / np.maximum(np.linalg.norm(decoded, axis=1, keepdims=True), 1e-12)
    cn = codes / np.maximum(np.linalg.norm(codes, axis=1, keepdims=True), 1e-12)
    pred = (dn @ cn.T).argmax(axis=1).reshape(h, w)

    mask = gt_class_ids >= 0
    gt = gt_class_ids[mask]
    pr = pred[mask]
    ious = []
    correct = (gt == pr).sum()
    for c in range(len(codes)):
        inter = int(((gt == c) & (pr == c)).sum())
        union = int(((gt == c) | (pr == c)).sum())
        if union == 0:
            continue   # absent everywhere: no opinion
        ious.append(inter / union)
    miou = float(np.mean(ious)) if ious else float("nan")
    acc = float(correct / max(mask.sum(), 1))
    return miou, acc
