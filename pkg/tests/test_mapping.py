"""Map maintenance: insertion, importance pruning, Adam optimization,
refinement, and the map container format."""

import numpy as np
import pytest

from fslam.geometry import CameraIntrinsics, Frame, GaussianMap, PoseSE3, se3_exp
from fslam.losses import LossWeights, total_loss
from fslam.mapping import (ImportanceRecord, MapOptimizer, export_ply,
                           importance_scores, insert_from_keyframe, load_map,
                           optimize_map_step, post_trajectory_refine,
                           prune_percentile, save_map, spacing_clamp,
                           standard_prune)
from fslam.rasterizer import render_frame

K64 = CameraIntrinsics(fx=60, fy=60, cx=31.5, cy=31.5, width=64, height=64)


def _flat_frame(depth_value=2.0, pose=None):
    return Frame(rgb=np.full((64, 64, 3), 0.5),
                 depth=np.full((64, 64), depth_value),
                 intrinsics=K64, pose=pose or PoseSE3.identity())


def _tiny_map(n, latent_dim=2, rounds=0, psi_seed=0):
    g = GaussianMap(latent_dim=latent_dim, scene_extent=1.0)
    r = np.random.default_rng(psi_seed)
    g.append(r.uniform(-1, 1, (n, 3)), np.full((n, 3), 0.05),
             np.tile([1, 0, 0, 0.0], (n, 1)), np.full((n, 3), 0.5),
             np.full(n, 0.5), np.zeros((n, latent_dim)),
             insertion_round=rounds)
    return g


# ---- insertion ----

def test_insert_counts_and_defaults():
    g = GaussianMap(latent_dim=4, scene_extent=4.0)
    assert insert_from_keyframe(g, _flat_frame(), stride=4)
    assert len(g) == (64 // 4) ** 2
    assert np.all(g.opacity == 0.5)
    assert np.allclose(g.quat, [1, 0, 0, 0])
    # isotropic scales from local spacing: flat wall at stride 4, z=2,
    # fx=60 -> neighbor gap 4 * 2/60 = 0.1333
    assert np.allclose(g.scales, g.scales[:, :1])
    interior = g.scales[:, 0][(np.abs(g.mu[:, 0]) < 0.8) & (np.abs(g.mu[:, 1]) < 0.8)]
    assert np.allclose(interior, 4 * 2.0 / 60, rtol=0.05)


def test_insert_backprojection_position():
    """One valid pixel at (31, 31) with depth 2 lands at the ray through that
    pixel, shifted by the camera translation."""
    g = GaussianMap(latent_dim=4, scene_extent=4.0)
    d = np.zeros((64, 64))
    d[31, 31] = 2.0
    fr = Frame(rgb=np.full((64, 64, 3), 0.5), depth=d, intrinsics=K64,
               pose=PoseSE3(np.eye(3), np.array([1.0, 0, 0])))
    assert insert_from_keyframe(g, fr, stride=1)
    assert len(g) == 1
    expect = np.array([(31 - 31.5) / 60 * 2.0 + 1.0, (31 - 31.5) / 60 * 2.0, 2.0])
    assert np.allclose(g.mu[0], expect, atol=1e-12)


def test_insert_no_valid_depth_is_noop():
    g = GaussianMap(latent_dim=4, scene_extent=4.0)
    fr = Frame(rgb=np.full((64, 64, 3), 0.5), depth=np.zeros((64, 64)),
               intrinsics=K64, pose=PoseSE3.identity())
    assert not insert_from_keyframe(g, fr)
    assert len(g) == 0


def test_insert_rejects_bad_args():
    g = GaussianMap(latent_dim=4, scene_extent=4.0)
    fr = _flat_frame()
    with pytest.raises(ValueError):
        insert_from_keyframe(g, fr, stride=0)
    fr.pose = None
    with pytest.raises(ValueError):
        insert_from_keyframe(g, fr)


# ---- percentile pruning ----

def test_prune_nearest_rank_exact():
    """psi = 1..10 at p=30: nearest-rank threshold is the 3rd order statistic,
    so exactly rows 0..2 go."""
    g = _tiny_map(10)
    keep_mu = g.mu[3:].copy()
    rec = ImportanceRecord(psi=np.arange(1.0, 11.0), round=5)
    assert prune_percentile(g, rec, 30.0) == 3
    assert len(g) == 7
    assert np.array_equal(g.mu, keep_mu)


def test_prune_tie_break_by_index():
    g = _tiny_map(6)
    survivors = g.mu[2:].copy()
    rec = ImportanceRecord(psi=np.zeros(6), round=5)
    # all tied: cap = ceil(30% of 6) = 2, lowest indices go first
    assert prune_percentile(g, rec, 30.0) == 2
    assert np.array_equal(g.mu, survivors)


def test_prune_protects_recent_rounds():
    # threshold lands on the protected newcomers: nothing removable
    g = _tiny_map(4, rounds=np.array([5, 5, 4, 4]))
    rec = ImportanceRecord(psi=np.array([0.0, 0.1, 0.2, 9.9]), round=5)
    assert prune_percentile(g, rec, 50.0, protect_rounds=1) == 0
    assert len(g) == 4
    # an old splat under the threshold still goes
    rec2 = ImportanceRecord(psi=np.array([0.0, 0.1, 0.05, 9.9]), round=5)
    assert prune_percentile(g, rec2, 50.0, protect_rounds=1) == 1
    assert np.array_equal(g.insertion_round, [5, 5, 4])


def test_prune_candidates_limit_domain():
    """Splats outside every scoring view keep psi = 0 but are not fair game:
    the percentile and the victims are taken over the candidate set only."""
    g = _tiny_map(10)
    psi = np.array([0, 0, 0, 0, 0, 5.0, 1.0, 4.0, 2.0, 3.0])
    cand = np.zeros(10, dtype=bool)
    cand[5:] = True
    rec = ImportanceRecord(psi=psi, round=5, candidates=cand)
    removed = prune_percentile(g, rec, 40.0)
    # cap = ceil(40% of 5 candidates) = 2 -> indices 6 and 8, never 0..4
    assert removed == 2
    assert len(g) == 8
    assert np.array_equal(g.mu[:5], _tiny_map(10).mu[:5])


def test_prune_empty_candidates_is_noop():
    g = _tiny_map(5)
    rec = ImportanceRecord(psi=np.zeros(5), round=5,
                           candidates=np.zeros(5, dtype=bool))
    assert prune_percentile(g, rec, 50.0) == 0
    assert len(g) == 5


def test_prune_validation():
    g = _tiny_map(5)
    with pytest.raises(ValueError):
        prune_percentile(g, ImportanceRecord(np.zeros(5), 0), 100.0)
    with pytest.raises(ValueError):
        prune_percentile(g, ImportanceRecord(np.zeros(4), 0), 10.0)
    with pytest.raises(ValueError):
        prune_percentile(g, ImportanceRecord(np.zeros(5), 0,
                                             candidates=np.ones(3, bool)), 10.0)
    assert prune_percentile(g, ImportanceRecord(np.zeros(5), 0), 0.0) == 0


def test_standard_prune_idempotent():
    g = GaussianMap(latent_dim=2, scene_extent=4.0)
    g.append(np.zeros((3, 3)), np.array([[0.05] * 3, [0.9] * 3, [0.05] * 3]),
             np.tile([1, 0, 0, 0.0], (3, 1)), np.full((3, 3), 0.5),
             np.array([0.5, 0.5, 1e-4]), np.zeros((3, 2)))
    # row 1 oversize (0.9 > 10% of extent), row 2 faded
    assert standard_prune(g) == 2
    assert standard_prune(g) == 0
    assert len(g) == 1


# ---- importance scores ----

def test_importance_localizes_error():
    """Corrupting only the left half of the observation should load psi onto
    the splat rendered there."""
    g = GaussianMap(latent_dim=2, scene_extent=4.0)
    g.append(np.array([[-0.5, 0, 2.0], [0.5, 0, 2.0]]), np.full((2, 3), 0.15),
             np.tile([1, 0, 0, 0.0], (2, 1)),
             np.array([[0.9, 0.1, 0.1], [0.1, 0.9, 0.1]]), np.full(2, 0.8),
             np.zeros((2, 2)))
    pose = PoseSE3.identity()
    obs = np.clip(render_frame(g, pose, K64, channels=("color",)).color, 0, 1).copy()
    obs[:, :32] = 1.0 - obs[:, :32]
    fr = Frame(rgb=obs, depth=np.zeros((64, 64)), intrinsics=K64, pose=pose)
    rec = importance_scores(g, [fr])
    assert rec.psi[0] > 10 * rec.psi[1]
    assert rec.candidates is not None and rec.candidates.all()


def _occlusion_scene():
    g = GaussianMap(latent_dim=2, scene_extent=4.0)
    for z in (1.4, 1.6, 1.8, 2.0):
        g.append(np.array([[0, 0, z]]), np.full((1, 3), 5.0),
                 np.array([[1, 0, 0, 0.0]]), np.array([[0.7, 0.2, 0.2]]),
                 np.array([0.99]), np.zeros((1, 2)))
    g.append(np.array([[0, 0, 3.0]]), np.full((1, 3), 0.3),
             np.array([[1, 0, 0, 0.0]]), np.array([[0.1, 0.9, 0.1]]),
             np.array([0.9]), np.zeros((1, 2)))
    return g


def test_importance_occluded_splat_scores_zero():
    """A splat buried behind near-opaque layers contributes nothing, and a
    finite-difference probe on its opacity agrees exactly: early termination
    zeroes both."""
    pose = PoseSE3.identity()
    g = _occlusion_scene()
    obs = np.clip(render_frame(g, pose, K64, channels=("color",)).color + 0.3, 0, 1)
    fr = Frame(rgb=obs, depth=np.zeros((64, 64)), intrinsics=K64, pose=pose)
    rec = importance_scores(g, [fr])
    assert rec.psi[4] == 0.0
    assert rec.psi[0] > 0

    w = LossWeights()
    base = total_loss(render_frame(g, pose, K64, channels=("color", "feature")),
                      fr, None, g.scales, w, 0, include_regularizers=False)[0]
    gp = _occlusion_scene()
    gp.opacity[4] += 1e-5
    bumped = total_loss(render_frame(gp, pose, K64, channels=("color", "feature")),
                        fr, None, gp.scales, w, 0, include_regularizers=False)[0]
    assert bumped == base


def test_importance_requires_finite():
    g = _tiny_map(3)
    rec = importance_scores(g, [])
    assert np.array_equal(rec.psi, np.zeros(3))
    assert not rec.candidates.any()


# ---- optimization ----

def _render_scene(seed, n=60, size=(80, 60)):
    r = np.random.default_rng(seed)
    k = CameraIntrinsics(fx=70, fy=70, cx=(size[0] - 1) / 2, cy=(size[1] - 1) / 2,
                         width=size[0], height=size[1])
    g = GaussianMap(latent_dim=4, scene_extent=4.0)
    mu = np.column_stack([r.uniform(-1.2, 1.2, n), r.uniform(-0.9, 0.9, n),
                          r.uniform(1.5, 3.0, n)])
    g.append(mu, r.uniform(0.08, 0.25, (n, 3)), r.normal(size=(n, 4)),
             r.uniform(0.1, 0.9, (n, 3)), r.uniform(0.4, 0.95, n),
             r.normal(size=(n, 4)) * 0.3)
    frames = []
    for i in range(3):
        pose = se3_exp(np.array([0, 0.03 * i, 0, 0.05 * i, 0, 0]))
        o = render_frame(g, pose, k, channels=("color", "median"))
        frames.append(Frame(rgb=np.clip(o.color, 0, 1),
                            depth=np.maximum(o.depth_median, 0),
                            intrinsics=k, pose=pose))
    return g, frames


def _perturbed(gt_map, seed):
    noisy = gt_map.copy()
    r = np.random.default_rng(seed)
    noisy.mu += r.normal(scale=0.03, size=noisy.mu.shape)
    noisy.color[...] = np.clip(noisy.color + r.normal(scale=0.15,
                                                      size=noisy.color.shape), 0, 1)
    noisy.generation += 1
    return noisy


def _window_loss(g, frames, w):
    tot = 0.0
    for fr in frames:
        o = render_frame(g, fr.pose, fr.intrinsics,
                         channels=("color", "feature", "depth", "median"))
        tot += total_loss(o, fr, None, g.scales, w, 0)[0]
    return tot / len(frames)


def test_optimize_recovers_perturbed_map():
    gt, kfs = _render_scene(11)
    noisy = _perturbed(gt, 5)
    w = LossWeights()
    before = _window_loss(noisy, kfs, w)
    optimize_map_step(noisy, kfs, weights=w, max_steps=80,
                      rng=np.random.default_rng(7), optimizer=MapOptimizer())
    after = _window_loss(noisy, kfs, w)
    assert after < 0.5 * before
    # constraint maintenance after stepping
    assert np.allclose(np.linalg.norm(noisy.quat, axis=1), 1.0)
    assert noisy.opacity.min() >= 1e-4 and noisy.opacity.max() <= 0.9999
    assert noisy.color.min() >= 0 and noisy.color.max() <= 1


def test_optimize_trace_deterministic():
    gt, kfs = _render_scene(11)
    traces = []
    for _ in range(2):
        noisy = _perturbed(gt, 5)
        traces.append(optimize_map_step(noisy, kfs, weights=LossWeights(),
                                        max_steps=25,
                                        rng=np.random.default_rng(7),
                                        optimizer=MapOptimizer()))
    assert traces[0] == traces[1]


def test_optimizer_moments_reset_on_structural_edit():
    """Adam momentum must not carry across insert/prune: after a structural
    edit a zero-gradient step leaves the map untouched."""
    g = _tiny_map(4)
    opt = MapOptimizer()
    grads = {k: np.ones_like(getattr(g, k)) for k in MapOptimizer.GROUPS}
    opt.apply(g, grads)
    g.keep(np.array([True, True, True, False]))
    snap = g.mu.copy()
    zero = {k: np.zeros_like(getattr(g, k)) for k in MapOptimizer.GROUPS}
    opt.apply(g, zero)
    assert np.array_equal(g.mu, snap)


def test_optimize_validation():
    g = _tiny_map(3)
    with pytest.raises(ValueError):
        optimize_map_step(g, [], max_steps=5)
    with pytest.raises(ValueError):
        optimize_map_step(g, [None], max_steps=0)
    empty = GaussianMap(latent_dim=2, scene_extent=1.0)
    assert optimize_map_step(empty, [None], max_steps=5) == []


# ---- refinement ----

def test_refine_never_lowers_keyframe_psnr():
    gt, kfs = _render_scene(21)
    pert = _perturbed(gt, 9)
    info = post_trajectory_refine(pert, kfs, weights=LossWeights(),
                                  iterations=40, densify=False,
                                  rng=np.random.default_rng(3))
    assert info["psnr_after"] >= info["psnr_before"]


def test_refine_revert_restores_exactly():
    """Force a harmful refinement by cranking the learning rate; the guard
    must restore the pre-refinement map bit for bit."""
    from fslam.mapping import OptimConfig

    gt, kfs = _render_scene(31)
    snap = gt.copy()
    bad = OptimConfig(lr_mu_frac=0.5, lr_scales=0.5, lr_color=0.5)
    info = post_trajectory_refine(gt, kfs, weights=LossWeights(), iterations=15,
                                  rng=np.random.default_rng(0), opt_cfg=bad)
    if info["reverted"]:
        assert np.array_equal(gt.mu, snap.mu)
        assert np.array_equal(gt.color, snap.color)
        assert info["psnr_after"] == info["psnr_before"]
    else:
        assert info["psnr_after"] >= info["psnr_before"]


def test_refine_densify_adds_splats():
    gt, kfs = _render_scene(41)
    pert = _perturbed(gt, 2)
    n0 = len(pert)
    info = post_trajectory_refine(pert, kfs, weights=LossWeights(),
                                  iterations=30, densify=True,
                                  rng=np.random.default_rng(3))
    assert info["densified"] > 0
    assert len(pert) > n0 - info["densified"]


def test_spacing_clamp_bounds_scales():
    g = GaussianMap(latent_dim=2, scene_extent=10.0)
    grid = np.stack(np.meshgrid(np.arange(4.0), np.arange(4.0), [0.0]),
                    axis=-1).reshape(-1, 3)
    n = len(grid)
    scales = np.full((n, 3), 1e-5)
    scales[0] = 9.0
    g.append(grid, scales, np.tile([1, 0, 0, 0.0], (n, 1)),
             np.full((n, 3), 0.5), np.full(n, 0.5), np.zeros((n, 2)))
    spacing_clamp(g, k=3, lo=0.1, hi=3.0)
    # unit grid: 3-NN spacing is between 1 and 2 everywhere
    assert g.scales.max() <= 3.0 * 2.0
    assert g.scales.min() >= 0.1 * 1.0


# ---- serialization ----

def test_map_roundtrip(tmp_path):
    gt, _ = _render_scene(11)
    p = tmp_path / "m.fsmp"
    save_map(gt, p)
    back = load_map(p)
    assert len(back) == len(gt)
    assert back.latent_dim == gt.latent_dim
    assert back.scene_extent == pytest.approx(gt.scene_extent)
    for name in ("mu", "scales", "quat", "color", "latent"):
        assert np.allclose(getattr(back, name), getattr(gt, name), atol=1e-6)
    assert np.array_equal(back.insertion_round, gt.insertion_round)


def test_map_load_rejects_corruption(tmp_path):
    gt, _ = _render_scene(11)
    p = tmp_path / "m.fsmp"
    save_map(gt, p)
    raw = p.read_bytes()
    (tmp_path / "bad_magic.fsmp").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="not a map"):
        load_map(tmp_path / "bad_magic.fsmp")
    (tmp_path / "short.fsmp").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="size"):
        load_map(tmp_path / "short.fsmp")
    import struct

    bumped = raw[:4] + struct.pack("<I", 99) + raw[8:]
    (tmp_path / "vers.fsmp").write_bytes(bumped)
    with pytest.raises(ValueError, match="version"):
        load_map(tmp_path / "vers.fsmp")


def test_ply_export_layout(tmp_path):
    g = _tiny_map(7)
    p = tmp_path / "m.ply"
    export_ply(g, p)
    raw = p.read_bytes()
    header, _, body = raw.partition(b"end_header\n")
    assert b"element vertex 7" in header
    assert len(body) == 7 * (12 + 3 + 4)
    first = np.frombuffer(body[:12], dtype="<f4")
    assert np.allclose(first, g.mu[0], atol=1e-6)
