"""Mapping losses with hand-derived gradients.

Every term returns both its value and the gradient with respect to its
rendered inputs, so the map optimizer can push a single per-channel gradient
image through the rasterizer backward pass. Finite-difference agreement for
each term is enforced by the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .geometry import CameraIntrinsics, FeaturePyramid
from .features import LatentCodec

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class LossDiagnosticError(RuntimeError):
    """A loss term went non-finite; the message names the term."""

    def __init__(self, term: str, value: float):
        super().__init__(f"loss term '{term}' is non-finite ({value})")
        self.term = term


@dataclass
class LossWeights:
    lambda1: float = 0.8        # color L1
    lambda2: float = 0.2        # color 1 - SSIM
    lambda_f: float = 1.0
    lambda_d: float = 0.5
    lambda_pcc: float = 0.05
    lambda_n: float = 0.05
    lambda0: float = 1e-4       # barrier ramp start
    lambda_max: float = 1e-2    # barrier ramp ceiling
    ramp_t: float = 1000.0
    lambda_thin: float = 1e-2
    barrier_eps: float = 1e-6
    pcc_block: int = 32

    def validate(self) -> "LossWeights":
        for name in ("lambda1", "lambda2", "lambda_f", "lambda_d", "lambda_pcc",
                     "lambda_n", "lambda0", "lambda_max", "lambda_thin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.ramp_t < 1:
            raise ValueError("ramp_t must be >= 1")
        if self.barrier_eps <= 0:
            raise ValueError("barrier_eps must be > 0")
        if self.pcc_block < 2:
            raise ValueError("pcc_block must be >= 2")
        return self


# ---- SSIM ----

def _ssim_kernel() -> np.ndarray:
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    return k / k.sum()


_K1D = _ssim_kernel()


def _filt_valid(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter, valid region only (crop of half-window)."""
    from scipy.ndimage import convolve1d

    r = SSIM_WINDOW // 2
    out = convolve1d(img, _K1D, axis=0, mode="constant")
    out = convolve1d(out, _K1D, axis=1, mode="constant")
    return out[r:-r, r:-r]


def _filt_adjoint(grad: np.ndarray, shape) -> np.ndarray:
    """Adjoint of _filt_valid: zero-pad then filter with the same kernel."""
    from scipy.ndimage import convolve1d

    r = SSIM_WINDOW // 2
    padded = np.zeros(shape)
    padded[r:-r, r:-r] = grad
    out = convolve1d(padded, _K1D, axis=0, mode="constant")
    return convolve1d(out, _K1D, axis=1, mode="constant")


def _ssim_single(a: np.ndarray, b: np.ndarray):
    c1 = (SSIM_K1) ** 2
    c2 = (SSIM_K2) ** 2
    mu_a = _filt_valid(a)
    mu_b = _filt_valid(b)
    mu_aa = _filt_valid(a * a)
    mu_bb = _filt_valid(b * b)
    mu_ab = _filt_valid(a * b)
    va = mu_aa - mu_a**2
    vb = mu_bb - mu_b**2
    cov = mu_ab - mu_a * mu_b
    n1 = 2.0 * mu_a * mu_b + c1
    n2 = 2.0 * cov + c2
    d1 = mu_a**2 + mu_b**2 + c1
    d2 = va + vb + c2
    smap = (n1 * n2) / (d1 * d2)
    value = float(smap.mean())

    # adjoint: d(mean S)/da through mu_a, va, cov
    g = 1.0 / smap.size
    ds_dmu_a = g * (2.0 * mu_b * n2 * d1 - 2.0 * mu_a * n1 * n2) / (d1**2 * d2)
    ds_dva = g * (-n1 * n2) / (d1 * d2**2)
    ds_dcov = g * (2.0 * n1) / (d1 * d2)
    # va = mu_aa - mu_a^2: route through both filtered moments
    t_mu = ds_dmu_a - 2.0 * mu_a * ds_dva - mu_b * ds_dcov
    grad = (_filt_adjoint(t_mu, a.shape)
            + 2.0 * a * _filt_adjoint(ds_dva, a.shape)
            + b * _filt_adjoint(ds_dcov, a.shape))
    return value, grad


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM, 11x11 Gaussian window sigma 1.5, data range 1.

    Images are (H, W) or (H, W, C); channels are averaged. Matches the
    common valid-window convention (border of half a window cropped).
    """
    v, _ = ssim_with_grad(a, b)
    return v


def ssim_with_grad(a: np.ndarray, b: np.ndarray) -> Tuple[float, np.ndarray]:
    """SSIM plus d(SSIM)/da, same shape as a."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return _ssim_single(a, b)
    vals = []
    grad = np.zeros_like(a)
    for c in range(a.shape[2]):
        v, g = _ssim_single(a[..., c], b[..., c])
        vals.append(v)
        grad[..., c] = g / a.shape[2]
    return float(np.mean(vals)), grad


# ---- patchwise Pearson correlation ----

def pcc_loss(d: np.ndarray, d_obs: np.ndarray, block: int = 32) -> float:
    v, _, _ = pcc_loss_with_grad(d, d_obs, block)
    return v


def pcc_loss_with_grad(d: np.ndarray, d_obs: np.ndarray, block: int = 32):
    """1 - mean per-block Pearson correlation over valid pixels.

    Invalid pixels (d_obs == 0) are excluded; blocks with < 2 valid pixels or
    zero variance on either side are skipped. Returns (loss, grad wrt d,
    had_valid_blocks).
    """
    h, w = d.shape
    grad = np.zeros_like(d)
    rhos = []
    block_grads = []
    for by in range(0, h, block):
        for bx in range(0, w, block):
            sl = np.s_[by:by + block, bx:bx + block]
            mask = d_obs[sl] > 0
            if mask.sum() < 2:
                continue
            dv = d[sl][mask]
            ov = d_obs[sl][mask]
            dc = dv - dv.mean()
            oc = ov - ov.mean()
            sdd = np.dot(dc, dc)
            soo = np.dot(oc, oc)
            if sdd <= 0 or soo <= 0:
                continue
            sdo = np.dot(dc, oc)
            denom = np.sqrt(sdd * soo)
            rho = sdo / denom
            rhos.append(rho)
            g = oc / denom - rho * dc / sdd
            block_grads.append((sl, mask, g))
    if not rhos:
        return 0.0, grad, False
    n = len(rhos)
    for sl, mask, g in block_grads:
        sub = grad[sl]
        sub[mask] += -g / n
        grad[sl] = sub
    return float(1.0 - np.mean(rhos)), grad, True


# ---- normals ----

def normal_consistency_loss(n_exp: np.ndarray, n_med: np.ndarray,
                            n_obs: np.ndarray) -> float:
    """Mean (1 - cos) between each rendered normal map and the observed one.

    Zero normals mark invalid pixels and are excluded per map.
    """
    total = 0.0
    for n_r in (n_exp, n_med):
        valid = (np.linalg.norm(n_r, axis=2) > 0) & (np.linalg.norm(n_obs, axis=2) > 0)
        if valid.any():
            cos = (n_r * n_obs).sum(axis=2)[valid]
            total += float(np.mean(1.0 - cos))
    return total


def normals_with_grad(depth: np.ndarray, k: CameraIntrinsics):
    """Forward normals plus a closure mapping d(loss)/d(normals) -> d(loss)/d(depth)."""
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
    c = np.cross(du, dv)
    norm = np.linalg.norm(c, axis=2)
    ok &= norm > 1e-12
    safe = np.maximum(norm, 1e-12)
    unit = c / safe[..., None]
    sign = np.where((unit * pts).sum(axis=2) > 0.0, -1.0, 1.0)
    normals = np.where(ok[..., None], unit * sign[..., None], 0.0)

    us = (np.arange(w) - k.cx) / k.fx
    vs = (np.arange(h) - k.cy) / k.fy
    ax = np.broadcast_to(us[None, :], (h, w))
    ay = np.broadcast_to(vs[:, None], (h, w))

    def backward(g_n: np.ndarray) -> np.ndarray:
        g_unit = g_n * sign[..., None] * ok[..., None]
        dot = (unit * g_unit).sum(axis=2, keepdims=True)
        g_c = (g_unit - unit * dot) / safe[..., None]
        g_du = np.cross(dv, g_c)
        g_dv = np.cross(g_c, du)
        g_pts = np.zeros_like(pts)
        g_pts[:, 2:] += 0.5 * g_du[:, 1:-1]
        g_pts[:, :-2] -= 0.5 * g_du[:, 1:-1]
        g_pts[2:, :] += 0.5 * g_dv[1:-1, :]
        g_pts[:-2, :] -= 0.5 * g_dv[1:-1, :]
        return ax * g_pts[..., 0] + ay * g_pts[..., 1] + g_pts[..., 2]

    return normals, backward


def normal_term_with_depth_grad(depth: np.ndarray, n_obs: np.ndarray,
                                k: CameraIntrinsics):
    """(mean 1 - cos(n(depth), n_obs), gradient wrt depth)."""
    normals, backward = normals_with_grad(depth, k)
    valid = (np.linalg.norm(normals, axis=2) > 0) & (np.linalg.norm(n_obs, axis=2) > 0)
    cnt = int(valid.sum())
    if cnt == 0:
        return 0.0, np.zeros_like(depth)
    cos = (normals * n_obs).sum(axis=2)
    value = float(np.mean(1.0 - cos[valid]))
    g_n = np.where(valid[..., None], -n_obs / cnt, 0.0)
    return value, backward(g_n)


# ---- scale regularizers ----

def erank(scales: np.ndarray) -> np.ndarray:
    """exp(entropy of s^2 / sum s^2); 1 = needle, 3 = isotropic. Batched."""
    s2 = np.asarray(scales, dtype=np.float64) ** 2
    p = s2 / s2.sum(axis=-1, keepdims=True)
    h = -np.sum(p * np.log(p), axis=-1)
    return np.exp(h)


def erank_with_grad(scales: np.ndarray):
    s = np.asarray(scales, dtype=np.float64)
    s2 = s**2
    total = s2.sum(axis=-1, keepdims=True)
    p = s2 / total
    logp = np.log(p)
    h = -np.sum(p * logp, axis=-1)
    e = np.exp(h)
    dh = (2.0 * s / total) * (-logp - h[..., None])
    return e, e[..., None] * dh


def erank_barrier(scales: np.ndarray, lam_e: float, eps: float = 1e-6) -> float:
    v, _ = erank_barrier_with_grad(scales, lam_e, eps)
    return v


def erank_barrier_with_grad(scales: np.ndarray, lam_e: float, eps: float = 1e-6):
    """Mean of -log(erank - 1 + eps), scaled by lam_e; batched over rows."""
    scales = np.atleast_2d(np.asarray(scales, dtype=np.float64))
    e, de = erank_with_grad(scales)
    inner = e - 1.0 + eps
    if np.any(inner <= 0):
        raise AssertionError("erank barrier domain violated (erank <= 1 - eps)")
    n = scales.shape[0]
    value = float(lam_e * np.mean(-np.log(inner)))
    grad = (-lam_e / (inner[:, None] * n)) * de
    return value, grad


def lambda_ramp(t: float, lam0: float, lam_max: float, ramp_t: float) -> float:
    return lam0 + (lam_max - lam0) * (1.0 - np.exp(-t / ramp_t))


def thin_penalty(scales: np.ndarray, lam_thin: float) -> float:
    v, _ = thin_penalty_with_grad(scales, lam_thin)
    return v


def thin_penalty_with_grad(scales: np.ndarray, lam_thin: float):
    """lam_thin * mean over rows of min(s); subgradient picks the first min."""
    scales = np.atleast_2d(np.asarray(scales, dtype=np.float64))
    n = scales.shape[0]
    idx = np.argmin(scales, axis=1)
    value = float(lam_thin * np.mean(scales[np.arange(n), idx]))
    grad = np.zeros_like(scales)
    grad[np.arange(n), idx] = lam_thin / n
    return value, grad


# ---- bilinear resize (for the feature loss) ----

def _resize_coords(n_out: int, n_in: int):
    t = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    t = np.clip(t, 0.0, n_in - 1.0)
    i0 = np.floor(t).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = t - i0
    return i0, i1, f


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Proportional bilinear resample of (H, W, C) to (out_h, out_w, C)."""
    h, w = img.shape[:2]
    y0, y1, fy = _resize_coords(out_h, h)
    x0, x1, fx = _resize_coords(out_w, w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear_adjoint(grad: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of resize_bilinear: scatter the output gradient back."""
    out_h, out_w, c = grad.shape
    y0, y1, fy = _resize_coords(out_h, in_h)
    x0, x1, fx = _resize_coords(out_w, in_w)
    out = np.zeros((in_h, in_w, c))
    wy = np.stack([1 - fy, fy])       # (2, out_h)
    wx = np.stack([1 - fx, fx])       # (2, out_w)
    ys = np.stack([y0, y1])
    xs = np.stack([x0, x1])
    for a in range(2):
        for b in range(2):
            wgt = wy[a][:, None, None] * wx[b][None, :, None]
            np.add.at(out, (ys[a][:, None], xs[b][None, :]), grad * wgt)
    return out


# ---- feature loss ----

def feature_loss_with_grad(latent_map: np.ndarray, codec: LatentCodec,
                           pyr: FeaturePyramid):
    """Mean per-level L1 between decoded rendered latents and observed pyramids.

    The rendered latent image is resized to each level's grid, decoded through
    that level's head, and compared. Returns (loss, grad wrt latent_map).
    """
    h, w = latent_map.shape[:2]
    levels = (pyr.level16, pyr.level8, pyr.level4)
    total = 0.0
    grad = np.zeros_like(latent_map)
    for lv, obs in enumerate(levels):
        lh, lw, _ = obs.shape
        small = resize_bilinear(latent_map, lh, lw)
        out = codec.decode_level(small.reshape(-1, codec.latent_dim), lv)
        diff = out.reshape(lh, lw, -1) - obs
        denom = 3.0 * diff.size
        total += float(np.sum(np.abs(diff)) / denom)
        d_out = np.sign(diff) / denom
        d_small = d_out.reshape(-1, d_out.shape[2]) @ codec.head_matrix(lv)
        grad += resize_bilinear_adjoint(d_small.reshape(lh, lw, -1), h, w)
    return total, grad


# ---- combined objective ----

def total_loss(render, frame, codec: LatentCodec, map_scales: np.ndarray,
               weights: LossWeights, step: int,
               include_regularizers: bool = True):
    """Full mapping objective.

    render: RenderOutput carrying color, feature, depth_exp, depth_median.
    frame: observation with rgb, depth (0 = invalid), optional pyramid.
    map_scales: (N, 3) scales of the splats being optimized.

    Returns (loss, channel_grads, scale_grads, terms) where channel_grads feeds
    backward_render, scale_grads is the direct (N, 3) regularizer gradient, and
    terms maps term names to values. Raises LossDiagnosticError on non-finite
    terms.
    """
    terms: Dict[str, float] = {}
    grads: Dict[str, np.ndarray] = {}
    npix = frame.rgb.size

    diff = render.color - frame.rgb
    l1 = float(np.mean(np.abs(diff)))
    sval, sgrad = ssim_with_grad(render.color, frame.rgb)
    terms["rgb"] = weights.lambda1 * l1 + weights.lambda2 * (1.0 - sval)
    grads["color"] = weights.lambda1 * np.sign(diff) / npix - weights.lambda2 * sgrad

    if render.feature is not None and frame.pyramid is not None \
            and codec is not None and weights.lambda_f > 0:
        fval, fgrad = feature_loss_with_grad(render.feature, codec, frame.pyramid)
        terms["feat"] = weights.lambda_f * fval
        grads["feature"] = weights.lambda_f * fgrad
    else:
        terms["feat"] = 0.0

    k = frame.intrinsics
    valid = frame.depth > 0
    nval = int(valid.sum())
    depth_grad = np.zeros_like(frame.depth)
    terms["depth"] = 0.0
    if render.depth_exp is not None and nval > 0:
        ddiff = render.depth_exp - frame.depth
        l1d = float(np.sum(np.abs(ddiff[valid])) / nval)
        depth_grad += weights.lambda_d * np.where(valid, np.sign(ddiff), 0.0) / nval
        terms["depth"] = weights.lambda_d * l1d
        if weights.lambda_pcc > 0:
            pval, pgrad, _ = pcc_loss_with_grad(render.depth_exp, frame.depth,
                                                weights.pcc_block)
            terms["depth"] += weights.lambda_pcc * pval
            depth_grad += weights.lambda_pcc * pgrad

    terms["normal"] = 0.0
    if render.depth_exp is not None and weights.lambda_n > 0 and nval > 0:
        obs_depth = np.where(valid, frame.depth, 0.0)
        n_obs, _ = normals_with_grad(obs_depth, k)
        ev, eg = normal_term_with_depth_grad(render.depth_exp, n_obs, k)
        depth_grad += weights.lambda_n * eg
        med_grad = None
        mv = 0.0
        if render.depth_median is not None:
            mv, mg = normal_term_with_depth_grad(render.depth_median, n_obs, k)
            med_grad = weights.lambda_n * mg
        terms["normal"] = weights.lambda_n * (ev + mv)
        if med_grad is not None:
            grads["median"] = med_grad
    if render.depth_exp is not None and (terms["depth"] or terms["normal"]):
        grads["depth"] = depth_grad

    scale_grads = np.zeros_like(map_scales)
    terms["erank"] = 0.0
    terms["thin"] = 0.0
    if include_regularizers and len(map_scales):
        lam_e = lambda_ramp(step, weights.lambda0, weights.lambda_max, weights.ramp_t)
        bval, bgrad = erank_barrier_with_grad(map_scales, lam_e, weights.barrier_eps)
        tval, tgrad = thin_penalty_with_grad(map_scales, weights.lambda_thin)
        terms["erank"] = bval
        terms["thin"] = tval
        scale_grads = bgrad + tgrad

    for name, val in terms.items():
        if not np.isfinite(val):
            raise LossDiagnosticError(name, val)
    loss = float(sum(terms.values()))
    return loss, grads, scale_grads, terms
