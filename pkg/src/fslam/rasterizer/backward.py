"""Analytic gradients for the tiled rasterizer.

Per-pixel transmittances are rebuilt from the forward checkpoints rather than
stored, so memory stays proportional to splat count, not pixel-splat pairs.
The alpha chain folds all channel adjoints into one matrix V(x, i) so a single
reversed cumulative sum yields every dL/dalpha_i(x):

    dL/dalpha_i(x) = T_i(x) V(x, i) - S_i(x) / (1 - alpha_i(x))

with S_i the suffix sum of alpha_j T_j V(x, j) over j > i. Splats behind the
early-stop point get exact zeros, matching the forward cutoff.

Median-depth gradients flow only through the selected splat's plane; the
selection itself is treated as frozen (piecewise-constant), so no gradient is
routed through the 0.5-crossing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from ..geometry import quats_to_rotmats
from .forward import RenderRecording, _tile_alpha, _reconstruct_transmittance, run_tiles


@dataclass
class ParamGrads:
    """Per-splat gradients, indexed like the source map (culled rows zero)."""

    mu: np.ndarray
    scales: np.ndarray
    quat: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    latent: np.ndarray
    alpha_scores: Optional[Dict[str, np.ndarray]] = None
    planar_fallbacks: int = 0

    @staticmethod
    def zeros(n: int, latent_dim: int) -> "ParamGrads":
        return ParamGrads(mu=np.zeros((n, 3)), scales=np.zeros((n, 3)),
                          quat=np.zeros((n, 4)), color=np.zeros((n, 3)),
                          opacity=np.zeros(n), latent=np.zeros((n, latent_dim)))


def _suffix_sum(c: np.ndarray) -> np.ndarray:
    """S_i = sum_{j > i} c_j along the last axis."""
    cum = np.cumsum(c, axis=1)
    return cum[:, -1:] - cum


def _tile_grad_block(grads: Dict[str, np.ndarray], key: str, rec) -> Optional[np.ndarray]:
    g = grads.get(key)
    if g is None:
        return None
    block = g[rec.py0:rec.py0 + rec.height, rec.px0:rec.px0 + rec.width]
    return block.reshape(rec.height * rec.width, -1) if block.ndim == 3 \
        else block.reshape(-1)


def _backward_tile(cache, rec, cfg, grads, median_cols, score_keys,
                   score_only=False):
    """Accumulated per-splat adjoints for one tile.

    Returns (crows, dict of per-splat arrays). median_cols is (pixel, column)
    routing for pixels whose selected median splat lives in this tile. With
    ``score_only`` only the |dL/dalpha| sums are produced, which skips the
    parameter chains entirely.
    """
    g_kernel, alpha_raw, alpha, (dx, dy) = _tile_alpha(cache, rec, cfg)
    trans = _reconstruct_transmittance(alpha, rec.checkpoints, cfg.checkpoint_interval)
    include = trans >= cfg.stop_transmittance
    wgt = alpha * trans
    wgt *= include
    rows = rec.crows
    npix, m = alpha.shape

    gc = _tile_grad_block(grads, "color", rec)
    gf = _tile_grad_block(grads, "feature", rec)
    gd = _tile_grad_block(grads, "depth", rec)
    ga = _tile_grad_block(grads, "alpha", rec)
    gmed = _tile_grad_block(grads, "median", rec)

    out = {}
    v = np.zeros((npix, m))
    v_parts = {}
    if gc is not None:
        vc = gc @ cache.color[rows].T
        v += vc
        if "color" in score_keys:
            v_parts["color"] = vc
        if not score_only:
            out["color"] = wgt.T @ gc
    if gf is not None:
        vf = gf @ cache.latent[rows].T
        v += vf
        if "feature" in score_keys:
            v_parts["feature"] = vf
        if not score_only:
            out["latent"] = wgt.T @ gf
    if ga is not None:
        v += ga[:, None]

    if score_only:
        inv_om = 1.0 / (1.0 - alpha)
        scores = {}
        for key, vp in v_parts.items():
            sp = _suffix_sum(wgt * vp)
            scores[key] = np.abs((trans * vp - sp * inv_om) * include).sum(axis=0)
        out["scores"] = scores
        return rows, out

    need_depth = gd is not None or (gmed is not None and len(median_cols[0]))
    if need_depth:
        beta = cache.beta[rows]
        dpair = beta[:, 0] * dx + beta[:, 1] * dy + beta[:, 2]
        d_dpair = np.zeros((npix, m))
        if gd is not None:
            v += gd[:, None] * dpair
            d_dpair += gd[:, None] * wgt
        if gmed is not None and len(median_cols[0]):
            pix, col = median_cols
            d_dpair[pix, col] += gmed[pix]
        out["beta"] = np.stack([(d_dpair * dx).sum(axis=0),
                                (d_dpair * dy).sum(axis=0),
                                d_dpair.sum(axis=0)], axis=1)
        dmu2d_depth = np.stack([-(d_dpair * beta[:, 0]).sum(axis=0),
                                -(d_dpair * beta[:, 1]).sum(axis=0)], axis=1)
    else:
        dmu2d_depth = 0.0

    inv_om = 1.0 / (1.0 - alpha)
    s = _suffix_sum(wgt * v)
    d_alpha = (trans * v - s * inv_om) * include

    if v_parts:
        scores = {}
        for key, vp in v_parts.items():
            sp = _suffix_sum(wgt * vp)
            scores[key] = np.abs((trans * vp - sp * inv_om) * include).sum(axis=0)
        out["scores"] = scores

    unclamped = alpha_raw < cfg.alpha_clamp
    d_alpha_raw = d_alpha * unclamped
    out["opacity"] = (d_alpha_raw * g_kernel).sum(axis=0)

    d_rho2 = -0.5 * alpha_raw * d_alpha_raw
    ic = cache.icov2d[rows]
    rx = d_rho2 * dx
    ry = d_rho2 * dy
    out["icov"] = np.stack([(rx * dx).sum(axis=0),
                            (rx * dy).sum(axis=0),
                            (ry * dy).sum(axis=0)], axis=1)
    # icov entries are per-splat constants, so the mu2d contraction collapses
    # to column sums of rx, ry
    rxs = rx.sum(axis=0)
    rys = ry.sum(axis=0)
    out["mu2d"] = -2.0 * np.stack([ic[:, 0, 0] * rxs + ic[:, 0, 1] * rys,
                                   ic[:, 0, 1] * rxs + ic[:, 1, 1] * rys],
                                  axis=1) + dmu2d_depth
    return rows, out


def _median_routing(recording: RenderRecording, grads):
    """Per tile: (pixel, column) pairs routing median grads to their splat."""
    routes = []
    med = recording.median_index
    use = grads.get("median") is not None and med is not None
    inv = recording.cache.inv_index
    empty = (np.zeros(0, np.int64), np.zeros(0, np.int64))
    for rec in recording.tiles:
        if not use:
            routes.append(empty)
            continue
        block = med[rec.py0:rec.py0 + rec.height,
                    rec.px0:rec.px0 + rec.width].reshape(-1)
        pix = np.nonzero(block >= 0)[0]
        if len(pix) == 0:
            routes.append(empty)
            continue
        crow = inv[block[pix]]
        keep = crow >= 0
        pix, crow = pix[keep], crow[keep]
        order = np.argsort(rec.crows, kind="stable")
        pos = np.clip(np.searchsorted(rec.crows[order], crow), 0, len(order) - 1)
        col = order[pos]
        hit = rec.crows[col] == crow
        routes.append((pix[hit], col[hit]))
    return routes


def backward_render(recording: RenderRecording, grads: Dict[str, np.ndarray],
                    score_weights: Optional[Dict[str, float]] = None,
                    score_only: bool = False) -> ParamGrads:
    """Pull image-space gradients back to splat parameters.

    grads: any of {"color": (H,W,3), "feature": (H,W,D), "depth": (H,W),
    "median": (H,W), "alpha": (H,W)}. When ``score_weights`` maps channel
    names (color / feature) to weights, per-splat sums of |dL/dalpha(x)| are
    returned as well, for importance-based pruning. ``score_only`` computes
    just those sums and leaves the parameter gradients zero.
    """
    cache = recording.cache
    cfg = recording.config
    n = len(cache.inv_index)
    k_rows = len(cache.rows)
    dim = cache.latent.shape[1]
    score_keys = tuple(score_weights) if score_weights else ()

    acc = {
        "mu2d": np.zeros((k_rows, 2)), "icov": np.zeros((k_rows, 3)),
        "beta": np.zeros((k_rows, 3)), "color": np.zeros((k_rows, 3)),
        "latent": np.zeros((k_rows, dim)), "opacity": np.zeros(k_rows),
    }
    score_acc = {key: np.zeros(k_rows) for key in score_keys}

    routes = _median_routing(recording, grads)
    items = list(zip(recording.tiles, routes))
    results = run_tiles(
        lambda it: _backward_tile(cache, it[0], cfg, grads, it[1], score_keys,
                                  score_only),
        items, cfg.threads)

    for rows, res in results:
        for key in ("mu2d", "icov", "beta", "color", "latent", "opacity"):
            if key in res:
                acc[key][rows] += res[key]
        for key, val in res.get("scores", {}).items():
            score_acc[key][rows] += val

    grads_out = ParamGrads.zeros(n, dim) if score_only \
        else _chain_to_params(cache, acc, recording.intrinsics, n, dim)
    if score_weights:
        grads_out.alpha_scores = {}
        for key in score_keys:
            full = np.zeros(n)
            full[cache.rows] = score_acc[key]
            grads_out.alpha_scores[key] = full
    grads_out.planar_fallbacks = cache.planar_fallbacks
    return grads_out


def _quat_rotation_partials(q: np.ndarray) -> np.ndarray:
    """(K, 4, 3, 3) partial derivatives of R with respect to unit-quat terms."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    k = len(q)
    d = np.zeros((k, 4, 3, 3))
    o = np.zeros(k)
    d[:, 0] = 2.0 * np.stack([
        np.stack([o, -z, y], -1), np.stack([z, o, -x], -1),
        np.stack([-y, x, o], -1)], -2)
    d[:, 1] = 2.0 * np.stack([
        np.stack([o, y, z], -1), np.stack([y, -2 * x, -w], -1),
        np.stack([z, w, -2 * x], -1)], -2)
    d[:, 2] = 2.0 * np.stack([
        np.stack([-2 * y, x, w], -1), np.stack([x, o, z], -1),
        np.stack([-w, z, -2 * y], -1)], -2)
    d[:, 3] = 2.0 * np.stack([
        np.stack([-2 * z, -w, x], -1), np.stack([w, -2 * z, y], -1),
        np.stack([x, y, o], -1)], -2)
    return d


def _chain_to_params(cache, acc, k, n: int, dim: int) -> ParamGrads:
    """Per-splat image-space adjoints -> world-space parameter gradients."""
    out = ParamGrads.zeros(n, dim)
    k_rows = len(cache.rows)
    if k_rows == 0:
        return out
    rows = cache.rows

    out.color[rows] = acc["color"]
    out.latent[rows] = acc["latent"]
    out.opacity[rows] = acc["opacity"]

    # 2x2 inverse-covariance -> covariance: dC = -C^-1 dIC C^-1
    dic = np.zeros((k_rows, 2, 2))
    dic[:, 0, 0] = acc["icov"][:, 0]
    dic[:, 0, 1] = dic[:, 1, 0] = acc["icov"][:, 1]
    dic[:, 1, 1] = acc["icov"][:, 2]
    icov = cache.icov2d
    g2 = -np.einsum("nij,njk,nkl->nil", icov, dic, icov)

    jac = cache.jac
    sigma_cam = cache.sigma_cam
    d_sigma_c = np.einsum("nji,njk,nkl->nil", jac, g2, jac)
    d_jac = 2.0 * np.einsum("nij,njk,nkl->nil", g2, jac, sigma_cam)

    # planar coefficients a, b and the z passthrough
    mu_cam = cache.mu_cam
    x, y, z = mu_cam[:, 0], mu_cam[:, 1], mu_cam[:, 2]
    fx, fy = k.fx, k.fy
    da, db, dmz = acc["beta"][:, 0], acc["beta"][:, 1], acc["beta"][:, 2]
    live = ~cache.planar_bad
    da = da * live
    db = db * live

    gvec = cache.sig_mu
    mq = cache.quad
    dg = np.zeros((k_rows, 3))
    dg[:, 0] = da * (-z**2 / (fx * mq))
    dg[:, 1] = db * (-z**2 / (fy * mq))
    dm = (da * gvec[:, 0] / fx + db * gvec[:, 1] / fy) * z**2 / mq**2
    dz_planar = -2.0 * z / mq * (da * gvec[:, 0] / fx + db * gvec[:, 1] / fy)

    inv_sig = cache.inv_sigma_cam
    dmu_cam = np.einsum("nij,nj->ni", inv_sig, dg)
    dmu_cam += 2.0 * dm[:, None] * gvec
    dmu_cam[:, 2] += dz_planar + dmz
    d_ainv = np.einsum("ni,nj->nij", dg, mu_cam) + dm[:, None, None] * \
        np.einsum("ni,nj->nij", mu_cam, mu_cam)
    d_sigma_c += -np.einsum("nij,njk,nkl->nil", inv_sig, d_ainv, inv_sig)

    # projection and its Jacobian both depend on the camera-frame mean
    dmu_cam += np.einsum("nj,nji->ni", acc["mu2d"], jac)
    dmu_cam[:, 0] += d_jac[:, 0, 2] * (-fx / z**2)
    dmu_cam[:, 1] += d_jac[:, 1, 2] * (-fy / z**2)
    dmu_cam[:, 2] += (d_jac[:, 0, 0] * (-fx / z**2) + d_jac[:, 0, 2] * (2 * fx * x / z**3)
                      + d_jac[:, 1, 1] * (-fy / z**2) + d_jac[:, 1, 2] * (2 * fy * y / z**3))

    r_cw = cache.r_cw
    out.mu[rows] = dmu_cam @ r_cw
    gw = np.einsum("ji,njk,kl->nil", r_cw, d_sigma_c, r_cw)

    # world covariance factors: Sigma_w = R diag(s^2) R^T
    norm = np.linalg.norm(cache.raw_quat, axis=1)
    quat = cache.raw_quat / norm[:, None]
    rot = quats_to_rotmats(quat)
    scales = cache.raw_scales
    mm = np.einsum("nji,njk,nkl->nil", rot, gw, rot)
    out.scales[rows] = np.stack([mm[:, 0, 0], mm[:, 1, 1], mm[:, 2, 2]], axis=1) \
        * 2.0 * scales
    gw_sym = gw + np.transpose(gw, (0, 2, 1))
    s2 = scales**2
    d_rot = np.einsum("nij,njk->nik", gw_sym, rot * s2[:, None, :])
    partials = _quat_rotation_partials(quat)
    dq_hat = np.einsum("nik,npik->np", d_rot, partials)
    proj = (np.eye(4)[None] - np.einsum("ni,nj->nij", quat, quat)) / norm[:, None, None]
    out.quat[rows] = np.einsum("nij,nj->ni", proj, dq_hat)
    return out
