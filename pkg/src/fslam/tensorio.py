"""Binary tensor files (magic FSTF) and TUM-format trajectory text.

FSTF layout, all little-endian:
    magic   4 bytes  "FSTF"
    version u32      (currently 1)
    rank    u32
    dims    u32 * rank
    dtype   u32      0 = f32, 1 = f16
    payload row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import PoseSE3, quat_to_rotmat, rotmat_to_quat

TENSOR_MAGIC = b"FSTF"
TENSOR_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float16"): 1}


class FormatError(ValueError):
    """Corrupt or mismatched binary file."""


def tensor_bytes(array: np.ndarray) -> bytes:
    """Serialize an array to FSTF bytes; float32/float16 payloads supported."""
    array = np.asarray(array)
    if array.dtype not in _DTYPE_CODES:
        array = array.astype(np.float32)
    code = _DTYPE_CODES[array.dtype]
    dims = array.shape
    if any(d >= 2**32 for d in dims):
        raise FormatError("dimension does not fit in u32")
    header = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims) if dims else b""
    header += struct.pack("<I", code)
    return header + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()


def tensor_from_bytes(raw: bytes, offset: int = 0):
    """Parse one FSTF blob at ``offset``; returns (array, next_offset)."""
    if len(raw) < offset + 12:
        raise FormatError(f"file too short for FSTF header ({len(raw) - offset} bytes)")
    magic = raw[offset:offset + 4]
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    version, rank = struct.unpack_from("<II", raw, offset + 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported FSTF version {version}")
    off = offset + 12
    if len(raw) < off + 4 * rank + 4:
        raise FormatError("truncated FSTF header")
    dims = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
    off += 4 * rank
    (code,) = struct.unpack_from("<I", raw, off)
    off += 4
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    expected = count * dtype.itemsize
    if len(raw) < off + expected:
        raise FormatError(f"payload is {len(raw) - off} bytes, header implies {expected}")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(dims).copy()
    return arr, off + expected


def write_tensor(path, array: np.ndarray) -> None:
    """Write an array as a standalone FSTF file."""
    Path(path).write_bytes(tensor_bytes(array))


def read_tensor(path) -> np.ndarray:
    """Read an FSTF file; returns the stored dtype (float32 or float16)."""
    raw = Path(path).read_bytes()
    arr, end = tensor_from_bytes(raw)
    if end != len(raw):
        raise FormatError(f"{len(raw) - end} trailing bytes after payload")
    return arr


def write_trajectory_tum(path, timestamps, poses) -> None:
    """Write "timestamp tx ty tz qx qy qz qw" lines, 6 decimals, qw last."""
    timestamps = np.asarray(timestamps, dtype=np.float64)
    if len(timestamps) != len(poses):
        raise ValueError("timestamps and poses differ in length")
    if np.any(np.diff(timestamps) < 0):
        raise ValueError("timestamps must be ascending")
    lines = []
    for ts, pose in zip(timestamps, poses):
        q = rotmat_to_quat(pose.rotation)  # (w, x, y, z)
        t = pose.translation
        lines.append("%.6f %.6f %.6f %.6f %.6f %.6f %.6f %.6f"
                     % (ts, t[0], t[1], t[2], q[1], q[2], q[3], q[0]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory_tum(path):
    """Read a TUM trajectory file -> (timestamps (N,), poses list of PoseSE3)."""
    timestamps = []
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 columns, got {len(parts)}")
        vals = [float(p) for p in parts]
        ts, tx, ty, tz, qx, qy, qz, qw = vals
        q = np.array([qw, qx, qy, qz])
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-6:
            raise FormatError(f"{path}:{lineno}: quaternion norm {norm:.8f} is not unit")
        timestamps.append(ts)
        poses.append(PoseSE3(quat_to_rotmat(q), np.array([tx, ty, tz])))
    return np.asarray(timestamps), poses


def write_png(path, image: np.ndarray) -> None:
    """Save a [0,1] float image (H,W) or (H,W,3) as 8-bit PNG."""
    from PIL import Image

    arr = np.clip(np.asarray(image), 0.0, 1.0)
    arr = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(str(path))
