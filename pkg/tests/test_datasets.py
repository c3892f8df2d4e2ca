"""Synthetic scene generator and the TUM-layout directory round trip."""

import numpy as np
import pytest

from fslam.datasets import (CODE_AMPLITUDE, TrajectorySpec, build_feature_corpus,
                            circle_pose, class_codes, load_tum_sequence,
                            synth_scene, write_tum_layout)
from fslam.geometry import pyramid_shapes
from fslam.tensorio import FormatError


def test_class_codes_orthogonal():
    codes = class_codes(8)
    gram = codes @ codes.T
    # three unit entries per class, disjoint across classes
    assert np.allclose(gram, 3 * CODE_AMPLITUDE**2 * np.eye(8))
    with pytest.raises(ValueError):
        class_codes(0)
    with pytest.raises(ValueError):
        class_codes(33)


def test_circle_pose_geometry():
    for theta in (0.0, 1.1, 3.9):
        p = circle_pose(theta, radius=0.5, height=0.2)
        assert np.allclose(np.linalg.norm(p.translation[[0, 2]]), 0.5)
        assert p.translation[1] == 0.2
        # optical axis radially outward, orthonormal frame
        outward = np.array([np.cos(theta), 0, np.sin(theta)])
        assert np.allclose(p.rotation[:, 2], outward)
        assert np.allclose(p.rotation @ p.rotation.T, np.eye(3), atol=1e-12)


def test_synth_deterministic():
    a = synth_scene(3, n_gaussians=300, n_classes=3,
                    traj=TrajectorySpec(frames=2), width=64, height=48)
    b = synth_scene(3, n_gaussians=300, n_classes=3,
                    traj=TrajectorySpec(frames=2), width=64, height=48)
    assert np.array_equal(a.gt_map.mu, b.gt_map.mu)
    assert np.array_equal(a.gt_map.color, b.gt_map.color)
    assert np.array_equal(a.class_ids, b.class_ids)
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa.rgb, fb.rgb)
        assert np.array_equal(fa.depth, fb.depth)
        assert np.array_equal(fa.pyramid.level16, fb.pyramid.level16)
    c = synth_scene(4, n_gaussians=300, n_classes=3,
                    traj=TrajectorySpec(frames=2), width=64, height=48)
    assert not np.array_equal(a.gt_map.mu, c.gt_map.mu)


def test_synth_scene_structure(small_scene):
    sc = small_scene
    assert len(sc.class_ids) == len(sc.gt_map)
    assert len(sc.frames) == len(sc.gt_poses) == 8
    k = sc.intrinsics
    assert (k.fx, k.fy) == (0.75 * 80, 0.75 * 80)
    assert (k.cx, k.cy) == (39.5, 29.5)
    shapes = pyramid_shapes(80, 60)
    for fr in sc.frames:
        assert fr.rgb.shape == (60, 80, 3)
        assert 0 <= fr.rgb.min() and fr.rgb.max() <= 1
        assert (fr.depth > 0).mean() > 0.9   # closed room: almost every ray hits
        for lvl, (w, h) in zip(fr.pyramid.levels(), shapes):
            assert lvl.shape[:2] == (h, w)
        assert fr.class_ids.min() >= -1
        assert fr.class_ids.max() < 4


def test_synth_pyramids_carry_class_codes(small_scene):
    """Pyramid levels are alpha blends of one-hot class codes: channels past
    n_classes stay exactly zero, per-pixel sums stay within alpha, and the
    stored level matches an independent render at the level intrinsics."""
    from fslam.geometry import CameraIntrinsics
    from fslam.rasterizer import render_frame

    sc = small_scene
    fr = sc.frames[2]
    lvl4 = fr.pyramid.level4       # stride-4 grid, slice 320:352 of the codes
    assert np.abs(lvl4[..., 4:]).max() == 0.0
    sums = lvl4[..., :4].sum(axis=-1)
    assert sums.min() >= 0.0 and sums.max() <= 1.0 + 1e-12

    k = sc.intrinsics
    w8, h8 = 10, 8
    sx, sy = w8 / k.width, h8 / k.height
    k8 = CameraIntrinsics(fx=k.fx * sx, fy=k.fy * sy,
                          cx=(k.cx + 0.5) * sx - 0.5, cy=(k.cy + 0.5) * sy - 0.5,
                          width=w8, height=h8)
    out = render_frame(sc.gt_map, sc.gt_poses[2], k8, channels=("feature",))
    assert np.array_equal(fr.pyramid.level8, out.feature[..., 256:320])


def test_tum_roundtrip(tmp_path, small_scene):
    sc = small_scene
    n = write_tum_layout(sc.frames, sc.gt_poses, tmp_path)
    assert n == 8
    frames, gt_times, gt_poses, skipped = load_tum_sequence(tmp_path)
    assert skipped == 0
    assert len(frames) == 8
    assert gt_times is not None and len(gt_poses) == 8
    k = frames[0].intrinsics
    assert (k.fx, k.fy, k.cx, k.cy) == (60.0, 60.0, 39.5, 29.5)
    for fr, orig, pose, gt in zip(frames, sc.frames, gt_poses, sc.gt_poses):
        assert fr.timestamp == pytest.approx(orig.timestamp, abs=1e-6)
        # 8-bit color, 0.2 mm depth quantization
        assert np.abs(fr.rgb - orig.rgb).max() <= 0.5 / 255 + 1e-12
        assert np.abs(fr.depth - orig.depth).max() <= 1e-4 + 1e-12
        assert np.allclose(pose.translation, gt.translation, atol=1e-6)
        assert np.allclose(pose.rotation, gt.rotation, atol=1e-6)


def test_tum_max_frames(tmp_path, small_scene):
    write_tum_layout(small_scene.frames, None, tmp_path, features=False)
    frames, gt_times, gt_poses, _ = load_tum_sequence(tmp_path, max_frames=3)
    assert len(frames) == 3
    assert gt_times is None and gt_poses is None


def test_tum_association_tolerance(tmp_path):
    (tmp_path / "rgb.txt").write_text("0.000000 rgb/a.png\n")
    (tmp_path / "depth.txt").write_text("0.500000 depth/a.png\n")
    frames, _, _, skipped = load_tum_sequence(tmp_path)
    assert frames == [] and skipped == 1
    frames, _, _, skipped = load_tum_sequence(tmp_path, tol=1.0)
    # now they pair up, but the files do not exist
    assert frames == [] and skipped == 1


def test_tum_missing_index(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_tum_sequence(tmp_path)


def test_tum_bad_intrinsics_file(tmp_path, small_scene):
    write_tum_layout(small_scene.frames[:1], None, tmp_path, features=False)
    (tmp_path / "intrinsics.txt").write_text("1.0 2.0\n")
    with pytest.raises(FormatError):
        load_tum_sequence(tmp_path)


def test_feature_corpus(small_scene):
    corpus = build_feature_corpus(small_scene.frames, per_frame=16, seed=0)
    assert corpus.shape == (8 * 16, 352)
    again = build_feature_corpus(small_scene.frames, per_frame=16, seed=0)
    assert np.array_equal(corpus, again)
    bare = [f for f in small_scene.frames[:0]]
    with pytest.raises(ValueError):
        build_feature_corpus(bare)
