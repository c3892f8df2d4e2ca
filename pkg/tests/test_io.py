import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays
from PIL import Image

from fslam.geometry import PoseSE3, se3_exp
from fslam.tensorio import (FormatError, load_trajectory_tum, read_tensor,
                            tensor_bytes, tensor_from_bytes, write_png,
                            write_tensor, write_trajectory_tum)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, array_shapes(max_dims=4, max_side=6),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_round_trip(arr):
    out, end = tensor_from_bytes(tensor_bytes(arr))
    assert end == len(tensor_bytes(arr))
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out, arr)


def test_tensor_half_precision(tmp_path, rng):
    arr = rng.normal(size=(5, 7)).astype(np.float16)
    p = tmp_path / "t.fstf"
    write_tensor(p, arr)
    out = read_tensor(p)
    assert out.dtype == np.float16
    np.testing.assert_array_equal(out, arr)


def test_tensor_scalar_rank_zero():
    out, _ = tensor_from_bytes(tensor_bytes(np.float32(3.5)))
    assert out.shape == () and out == np.float32(3.5)


def test_tensor_detects_corruption(tmp_path, rng):
    good = tensor_bytes(rng.normal(size=(4, 4)).astype(np.float32))
    with pytest.raises(FormatError, match="magic"):
        tensor_from_bytes(b"XXXX" + good[4:])
    with pytest.raises(FormatError, match="version"):
        tensor_from_bytes(good[:4] + b"\x09\x00\x00\x00" + good[8:])
    with pytest.raises(FormatError, match="payload"):
        tensor_from_bytes(good[:-8])
    with pytest.raises(FormatError):
        tensor_from_bytes(good[:6])
    p = tmp_path / "t.fstf"
    p.write_bytes(good + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        read_tensor(p)


def test_trajectory_round_trip(tmp_path, rng):
    poses = [se3_exp(rng.normal(size=6) * 0.5) for _ in range(9)]
    times = np.cumsum(rng.uniform(0.01, 0.1, size=9))
    p = tmp_path / "traj.txt"
    write_trajectory_tum(p, times, poses)
    t2, p2 = load_trajectory_tum(p)
    np.testing.assert_allclose(t2, times, atol=5e-7)
    for a, b in zip(poses, p2):
        # 6-decimal text snaps the values; the quat is renormalized on load
        assert np.abs(a.translation - b.translation).max() < 1e-6
        assert np.abs(a.rotation - b.rotation).max() < 5e-6


def test_trajectory_rejects_bad_lines(tmp_path):
    p = tmp_path / "traj.txt"
    p.write_text("0.0 1 2 3 0 0 0\n")
    with pytest.raises(FormatError, match="8 columns"):
        load_trajectory_tum(p)
    p.write_text("0.0 1 2 3 0 0 0 2.0\n")
    with pytest.raises(FormatError, match="unit"):
        load_trajectory_tum(p)


def test_trajectory_skips_comments(tmp_path):
    p = tmp_path / "traj.txt"
    p.write_text("# header\n\n0.5 0 0 0 0 0 0 1\n")
    t, poses = load_trajectory_tum(p)
    assert len(poses) == 1 and t[0] == 0.5
    np.testing.assert_allclose(poses[0].rotation, np.eye(3))


def test_trajectory_requires_ascending_times():
    with pytest.raises(ValueError, match="ascending"):
        write_trajectory_tum("/dev/null", [1.0, 0.5],
                             [PoseSE3.identity(), PoseSE3.identity()])


def test_write_png_quantization(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    p = tmp_path / "img.png"
    write_png(p, img)
    back = np.asarray(Image.open(p), dtype=np.float64) / 255.0
    assert back.shape == (3, 4)
    assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-9
