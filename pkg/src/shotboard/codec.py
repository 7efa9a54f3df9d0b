"""Causal shot packing and a linear patch codec.

Storyboard shots are laid out as a causal frame sequence: the first shot is a
single frame and every later shot is repeated ``T`` times, so a codec that
compresses ``T`` frames into one latent emits exactly one latent per shot.

The codec is a fixed linear map from ``p×p×C`` patches to ``d`` channels
(orthonormal rows drawn from a seeded Gaussian) with the pseudo-inverse as
decoder.  At ``d = p·p·C`` the round trip is exact up to rounding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PackingError, ShapeError
from .tensor.rng import make_rng, normal
from .tensor.serialize import load_tensor, save_tensor


def to_chw(image) -> np.ndarray:
    """``H×W×C`` uint8 or ``C×H×W`` float image -> ``C×H×W`` float64 in [0, 1]."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        return img.transpose(2, 0, 1).astype(np.float64) / 255.0
    if img.ndim != 3:
        raise ShapeError(f"expected a 3-d image, got shape {img.shape}")
    return img.astype(np.float64)


def to_uint8(chw: np.ndarray) -> np.ndarray:
    """``C×H×W`` float image -> ``H×W×C`` uint8, clipped to [0, 1]."""
    return np.round(np.clip(chw, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


@dataclass
class FrameSequence:
    frames: np.ndarray  # F×C×H×W
    shot_of_frame: list[int]
    T: int

    @property
    def num_shots(self) -> int:
        return self.shot_of_frame[-1] + 1


@dataclass
class LatentGrid:
    values: np.ndarray  # s×d×h×w
    p: int
    T: int = 1
    labels: list[str] = field(default_factory=list)

    @property
    def shape(self):
        return self.values.shape

    def sidecar(self) -> dict:
        s, d, h, w = self.values.shape
        return {"s": s, "d": d, "h": h, "w": w, "p": self.p, "T": self.T, "labels": list(self.labels)}


def frame_count(S: int, T: int) -> int:
    return 1 + T * (S - 1)


def shot_of_frame(S: int, T: int) -> list[int]:
    return [0] + [i for i in range(1, S) for _ in range(T)]


def pack_shots(shots, T: int = 4, p: int | None = None) -> FrameSequence:
    if len(shots) < 1:
        raise PackingError("need at least one shot to pack")
    if T < 1:
        raise PackingError(f"repetition factor T must be >= 1, got {T}")
    frames = [to_chw(s) for s in shots]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ShapeError(f"all shots must share one resolution, got {sorted(shapes)}")
    _, H, W = frames[0].shape
    if p is not None and (H % p or W % p):
        raise ShapeError(f"image {H}×{W} is not divisible by patch size {p}")
    owner = shot_of_frame(len(frames), T)
    return FrameSequence(np.stack([frames[i] for i in owner]), owner, T)


@dataclass(frozen=True)
class PatchCodec:
    enc: np.ndarray  # d × (p·p·C)
    dec: np.ndarray  # (p·p·C) × d
    p: int
    channels: int

    @property
    def d(self) -> int:
        return self.enc.shape[0]

    def patchify(self, chw: np.ndarray) -> np.ndarray:
        """``C×H×W`` -> ``(h·w)×(p·p·C)``; patch vectors are (py, px, c) row-major."""
        C, H, W = chw.shape
        p = self.p
        if C != self.channels or H % p or W % p:
            raise ShapeError(f"image {chw.shape} incompatible with codec (C={self.channels}, p={p})")
        x = chw.reshape(C, H // p, p, W // p, p).transpose(1, 3, 2, 4, 0)
        return x.reshape((H // p) * (W // p), p * p * C)

    def unpatchify(self, patches: np.ndarray, h: int, w: int) -> np.ndarray:
        p, C = self.p, self.channels
        x = patches.reshape(h, w, p, p, C).transpose(4, 0, 2, 1, 3)
        return x.reshape(C, h * p, w * p)

    def encode_image(self, chw: np.ndarray) -> np.ndarray:
        _, H, W = chw.shape
        h, w = H // self.p, W // self.p
        return (self.patchify(chw) @ self.enc.T).T.reshape(self.d, h, w)

    def decode_latent(self, latent: np.ndarray) -> np.ndarray:
        d, h, w = latent.shape
        return self.unpatchify(latent.reshape(d, h * w).T @ self.dec.T, h, w)


def make_codec(p: int = 4, channels: int = 3, d: int = 48, seed: int = 0) -> PatchCodec:
    """Fixed-seed codec with orthonormal encoder rows (``d ≤ p·p·C``) or columns."""
    n = p * p * channels
    g = normal(make_rng(seed), (max(d, n), min(d, n)), np.float64)
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))  # make the factorization unique
    enc = q.T if d <= n else q
    return PatchCodec(enc=enc, dec=np.linalg.pinv(enc), p=p, channels=channels)


def encode(seq: FrameSequence, codec: PatchCodec) -> LatentGrid:
    """Latent 0 from frame 0; latent i from the mean of shot i's ``T`` frames."""
    F = len(seq.frames)
    if (F - 1) % seq.T:
        raise PackingError(f"{F} frames is not of the form 1 + T(S-1) for T={seq.T}")
    S = 1 + (F - 1) // seq.T
    groups = [seq.frames[:1]] + [seq.frames[1 + seq.T * (i - 1): 1 + seq.T * i] for i in range(1, S)]
    latents = [codec.encode_image(g.mean(axis=0, dtype=np.float64)) for g in groups]
    return LatentGrid(np.stack(latents), codec.p, seq.T, [f"shot{i}" for i in range(S)])


def encode_shots(shots, codec: PatchCodec, T: int = 4) -> LatentGrid:
    return encode(pack_shots(shots, T, codec.p), codec)


def encode_reference(image, codec: PatchCodec, k: int = 0) -> LatentGrid:
    grid = encode(pack_shots([image], 1, codec.p), codec)
    grid.labels = [f"ref{k}"]
    return grid


def encode_references(images, codec: PatchCodec) -> LatentGrid | None:
    if not images:
        return None
    grids = [encode_reference(img, codec, k) for k, img in enumerate(images)]
    return LatentGrid(np.concatenate([g.values for g in grids]), codec.p, 1, [g.labels[0] for g in grids])


def decode(latents, codec: PatchCodec) -> np.ndarray:
    """One ``C×H×W`` image per latent slice (unclipped)."""
    values = latents.values if isinstance(latents, LatentGrid) else np.asarray(latents)
    return np.stack([codec.decode_latent(z.astype(np.float64)) for z in values])


def save_latents(path, grid: LatentGrid) -> None:
    path = Path(path)
    save_tensor(path, grid.values)
    path.with_suffix(".json").write_text(json.dumps(grid.sidecar(), sort_keys=True) + "\n")


def load_latents(path) -> LatentGrid:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    values = load_tensor(path)
    expected = (meta["s"], meta["d"], meta["h"], meta["w"])
    if values.shape != expected:
        raise ShapeError(f"latent file {path} has shape {values.shape}, sidecar says {expected}")
    return LatentGrid(values, meta["p"], meta["T"], meta["labels"])
