"""Feature pyramid sampling and the latent codec.

The codec compresses a 352-dim concatenated pyramid sample (256 + 64 + 32
channels, coarse to fine) into a D-dim latent with a one-hidden-layer tanh
encoder, and decodes back per level through affine heads. Each head carries a
rank-4 adapter residual that starts at exactly zero, so adapting online never
disturbs the pretrained mapping until the adapters move.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .geometry import FeaturePyramid
from .tensorio import FormatError, tensor_bytes, tensor_from_bytes

CODEC_MAGIC = b"FSAE"
CODEC_VERSION = 1
HIDDEN_WIDTH = 128
ADAPTER_RANK = 4
INPUT_DIM = sum(FeaturePyramid.CHANNELS)
VALID_LATENT_DIMS = (16, 20, 24, 28, 32)
WARMUP_STEPS = 200


def _level_sample(level: np.ndarray, xs: np.ndarray, width: int, height: int) -> np.ndarray:
    """Clamped bilinear sample of one pyramid level at image-space pixels."""
    h, w, _ = level.shape
    # pixel centers map proportionally between the image and the level grid
    lx = (xs[:, 0] + 0.5) * (w / width) - 0.5
    ly = (xs[:, 1] + 0.5) * (h / height) - 0.5
    lx = np.clip(lx, 0.0, w - 1.0)
    ly = np.clip(ly, 0.0, h - 1.0)
    x0 = np.floor(lx).astype(np.int64)
    y0 = np.floor(ly).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (lx - x0)[:, None]
    fy = (ly - y0)[:, None]
    top = level[y0, x0] * (1 - fx) + level[y0, x1] * fx
    bot = level[y1, x0] * (1 - fx) + level[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def sample_pyramid_batch(pyr: FeaturePyramid, xs: np.ndarray,
                         image_size: Tuple[int, int]) -> np.ndarray:
    """Sample all three levels at pixel coordinates xs (N, 2) -> (N, 352)."""
    width, height = image_size
    xs = np.asarray(xs, dtype=np.float64)
    if np.any(xs[:, 0] < 0) or np.any(xs[:, 0] > width - 1) \
            or np.any(xs[:, 1] < 0) or np.any(xs[:, 1] > height - 1):
        raise ValueError("sample coordinate outside image bounds")
    parts = [_level_sample(lv, xs, width, height)
             for lv in (pyr.level16, pyr.level8, pyr.level4)]
    return np.concatenate(parts, axis=1)


def sample_pyramid(pyr: FeaturePyramid, x, image_size: Tuple[int, int]) -> np.ndarray:
    return sample_pyramid_batch(pyr, np.asarray(x, dtype=np.float64)[None], image_size)[0]


def split_levels(u: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Split (..., 352) into the (256, 64, 32) level slices."""
    c0, c1, _ = FeaturePyramid.CHANNELS
    return u[..., :c0], u[..., c0:c0 + c1], u[..., c0 + c1:]


@dataclass
class LatentCodec:
    latent_dim: int
    enc_w1: np.ndarray   # (hidden, 352)
    enc_b1: np.ndarray   # (hidden,)
    enc_w2: np.ndarray   # (D, hidden)
    enc_b2: np.ndarray   # (D,)
    head_w: List[np.ndarray]     # per level (C_l, D)
    head_b: List[np.ndarray]     # per level (C_l,)
    adapter_b: List[np.ndarray]  # per level (C_l, rank), zero at init
    adapter_a: List[np.ndarray]  # per level (rank, D)
    skipped_steps: int = 0
    _adam: Optional[dict] = field(default=None, repr=False)

    @staticmethod
    def create(latent_dim: int = 24, seed: int = 0) -> "LatentCodec":
        if latent_dim not in VALID_LATENT_DIMS:
            raise ValueError(f"latent_dim must be one of {VALID_LATENT_DIMS}")
        rng = np.random.default_rng(seed)

        def glorot(rows, cols):
            lim = np.sqrt(6.0 / (rows + cols))
            return rng.uniform(-lim, lim, size=(rows, cols))

        head_w, head_b, ad_b, ad_a = [], [], [], []
        for c in FeaturePyramid.CHANNELS:
            head_w.append(glorot(c, latent_dim))
            head_b.append(np.zeros(c))
            ad_b.append(np.zeros((c, ADAPTER_RANK)))
            ad_a.append(glorot(ADAPTER_RANK, latent_dim))
        return LatentCodec(
            latent_dim=latent_dim,
            enc_w1=glorot(HIDDEN_WIDTH, INPUT_DIM), enc_b1=np.zeros(HIDDEN_WIDTH),
            enc_w2=glorot(latent_dim, HIDDEN_WIDTH), enc_b2=np.zeros(latent_dim),
            head_w=head_w, head_b=head_b, adapter_b=ad_b, adapter_a=ad_a)

    # ---- forward ----

    def encode(self, u: np.ndarray) -> np.ndarray:
        """(..., 352) -> (..., D)."""
        hid = np.tanh(u @ self.enc_w1.T + self.enc_b1)
        return hid @ self.enc_w2.T + self.enc_b2

    def head_matrix(self, level: int) -> np.ndarray:
        """Effective decode matrix W + B A for one level."""
        return self.head_w[level] + self.adapter_b[level] @ self.adapter_a[level]

    def decode_level(self, f: np.ndarray, level: int) -> np.ndarray:
        return f @ self.head_matrix(level).T + self.head_b[level]

    def decode(self, f: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(self.decode_level(f, lv) for lv in range(3))

    def decode_base(self, f: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Decode through the pretrained heads only, adapters ignored."""
        return tuple(f @ self.head_w[lv].T + self.head_b[lv] for lv in range(3))

    def copy(self) -> "LatentCodec":
        return LatentCodec(
            latent_dim=self.latent_dim,
            enc_w1=self.enc_w1.copy(), enc_b1=self.enc_b1.copy(),
            enc_w2=self.enc_w2.copy(), enc_b2=self.enc_b2.copy(),
            head_w=[w.copy() for w in self.head_w],
            head_b=[b.copy() for b in self.head_b],
            adapter_b=[b.copy() for b in self.adapter_b],
            adapter_a=[a.copy() for a in self.adapter_a],
            skipped_steps=self.skipped_steps)


def reconstruction_loss(codec: LatentCodec, u: np.ndarray):
    """Mean per-level L1 between decode(encode(u)) and the level slices of u."""
    f = codec.encode(u)
    outs = codec.decode(f)
    targets = split_levels(u)
    return float(np.mean([np.mean(np.abs(o - t)) for o, t in zip(outs, targets)]))


class _Adam:
    """Minimal Adam over a flat list of arrays."""

    def __init__(self, shapes, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, params, grads, lr_scale=1.0):
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * lr_scale * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def _encoder_backward(codec: LatentCodec, u, hid, d_f):
    """Gradients of the encoder for upstream d_f (N, D)."""
    d_hid = (d_f @ codec.enc_w2) * (1.0 - hid**2)
    return {
        "enc_w2": d_f.T @ hid, "enc_b2": d_f.sum(axis=0),
        "enc_w1": d_hid.T @ u, "enc_b1": d_hid.sum(axis=0),
    }


def pretrain(codec: LatentCodec, corpus: np.ndarray, steps: int = 800,
             batch: int = 256, lr: float = 1e-3, seed: int = 0) -> List[float]:
    """Autoencoder pretraining of encoder and base heads (adapters untouched).

    corpus: (N, 352). Returns the per-step loss trace.
    """
    rng = np.random.default_rng(seed)
    params = [codec.enc_w1, codec.enc_b1, codec.enc_w2, codec.enc_b2] \
        + codec.head_w + codec.head_b
    opt = _Adam([p.shape for p in params], lr=lr)
    trace = []
    n = len(corpus)
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch, n))
        u = corpus[idx]
        hid = np.tanh(u @ codec.enc_w1.T + codec.enc_b1)
        f = hid @ codec.enc_w2.T + codec.enc_b2
        targets = split_levels(u)
        loss = 0.0
        d_f = np.zeros_like(f)
        g_head = []
        for lv in range(3):
            out = codec.decode_level(f, lv)
            diff = out - targets[lv]
            denom = 3.0 * diff.size
            loss += np.sum(np.abs(diff)) / denom
            d_out = np.sign(diff) / denom
            g_head.append((d_out.T @ f, d_out.sum(axis=0)))
            d_f += d_out @ codec.head_matrix(lv)
        enc = _encoder_backward(codec, u, hid, d_f)
        grads = [enc["enc_w1"], enc["enc_b1"], enc["enc_w2"], enc["enc_b2"]] \
            + [g[0] for g in g_head] + [g[1] for g in g_head]
        opt.step(params, grads)
        trace.append(float(loss))
    return trace


def adapt_online(codec: LatentCodec, f_batch: np.ndarray, u_batch: np.ndarray,
                 step: int, base_lr: float = 1e-3,
                 warmup: int = WARMUP_STEPS) -> float:
    """One adapter-only update; base weights are never touched.

    The learning rate warms up linearly: base_lr * min(1, step / warmup).
    Returns the pre-step reconstruction loss on the batch. Non-finite
    gradients skip the update and bump ``codec.skipped_steps``.
    """
    lr_scale = min(1.0, step / warmup) if warmup > 0 else 1.0
    targets = split_levels(u_batch)
    params, grads = [], []
    loss = 0.0
    for lv in range(3):
        out = codec.decode_level(f_batch, lv)
        diff = out - targets[lv]
        denom = 3.0 * diff.size
        loss += np.sum(np.abs(diff)) / denom
        d_out = np.sign(diff) / denom
        d_eff = d_out.T @ f_batch          # gradient on the effective matrix
        params.append(codec.adapter_b[lv])
        grads.append(d_eff @ codec.adapter_a[lv].T)
        params.append(codec.adapter_a[lv])
        grads.append(codec.adapter_b[lv].T @ d_eff)
    if not all(np.all(np.isfinite(g)) for g in grads):
        codec.skipped_steps += 1
        return float(loss)
    if codec._adam is None:
        codec._adam = {"opt": _Adam([p.shape for p in params], lr=base_lr)}
    codec._adam["opt"].step(params, grads, lr_scale=lr_scale)
    return float(loss)


def warmup_lr(base_lr: float, step: int, warmup: int = WARMUP_STEPS) -> float:
    return base_lr * min(1.0, step / warmup) if warmup > 0 else base_lr


# ---- serialization ----

def save_codec(path, codec: LatentCodec) -> None:
    arrays = [codec.enc_w1, codec.enc_b1, codec.enc_w2, codec.enc_b2]
    for lv in range(3):
        arrays += [codec.head_w[lv], codec.head_b[lv],
                   codec.adapter_b[lv], codec.adapter_a[lv]]
    blob = CODEC_MAGIC + struct.pack("<IIIII", CODEC_VERSION, codec.latent_dim,
                                     HIDDEN_WIDTH, ADAPTER_RANK, len(arrays))
    for arr in arrays:
        blob += tensor_bytes(arr.astype(np.float32))
    Path(path).write_bytes(blob)


def load_codec(path) -> LatentCodec:
    raw = Path(path).read_bytes()
    if raw[:4] != CODEC_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {CODEC_MAGIC!r}")
    version, dim, hidden, rank, count = struct.unpack_from("<IIIII", raw, 4)
    if version != CODEC_VERSION:
        raise FormatError(f"unsupported codec version {version}")
    if hidden != HIDDEN_WIDTH or rank != ADAPTER_RANK:
        raise FormatError(f"unexpected codec geometry hidden={hidden} rank={rank}")
    off = 24
    arrays = []
    for _ in range(count):
        arr, off = tensor_from_bytes(raw, off)
        arrays.append(arr.astype(np.float64))
    if len(arrays) != 16:
        raise FormatError(f"expected 16 weight arrays, found {len(arrays)}")
    head_w, head_b, ad_b, ad_a = [], [], [], []
    for lv in range(3):
        head_w.append(arrays[4 + lv * 4])
        head_b.append(arrays[5 + lv * 4])
        ad_b.append(arrays[6 + lv * 4])
        ad_a.append(arrays[7 + lv * 4])
    return LatentCodec(latent_dim=dim, enc_w1=arrays[0], enc_b1=arrays[1],
                       enc_w2=arrays[2], enc_b2=arrays[3], head_w=head_w,
                       head_b=head_b, adapter_b=ad_b, adapter_a=ad_a)
