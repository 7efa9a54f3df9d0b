"""Token sequences: latent segments laid out with positions and labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ContractError, ShapeError

REF, SHOT = 0, 1


@dataclass
class Segment:
    kind: int  # REF or SHOT
    index: int  # k for references, s for shots
    t_idx: float
    phase: float
    noised: bool


@dataclass
class TokenSequence:
    """Flattened latent tokens in storage order.

    ``latents`` is ``n_segments×d×h×w`` in storage order; ``segments``
    describes each slice.  Per-token arrays are derived on demand.
    """

    latents: np.ndarray
    segments: list[Segment]
    strategy: str

    @property
    def grid(self) -> tuple[int, int]:
        return self.latents.shape[2], self.latents.shape[3]

    @property
    def tokens_per_segment(self) -> int:
        h, w = self.grid
        return h * w

    @property
    def n_tokens(self) -> int:
        return len(self.segments) * self.tokens_per_segment

    @property
    def K(self) -> int:
        return sum(seg.kind == REF for seg in self.segments)

    @property
    def S(self) -> int:
        return sum(seg.kind == SHOT for seg in self.segments)

    def tokens(self) -> np.ndarray:
        """``n_tokens×d`` token matrix (row-major over y, x inside a segment)."""
        n, d, h, w = self.latents.shape
        return self.latents.transpose(0, 2, 3, 1).reshape(n * h * w, d)

    def positions(self) -> np.ndarray:
        h, w = self.grid
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        per = np.stack([np.zeros(h * w), ys.reshape(-1), xs.reshape(-1)], axis=1)
        out = []
        for seg in self.segments:
            p = per.copy()
            p[:, 0] = seg.t_idx
            out.append(p)
        return np.concatenate(out)

    def phases(self) -> np.ndarray:
        return np.repeat([seg.phase for seg in self.segments], self.tokens_per_segment)

    def segment_of_token(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.segments)), self.tokens_per_segment)

    def kinds(self) -> np.ndarray:
        return np.array([seg.kind for seg in self.segments])

    def segment_slot(self, kind: int, index: int) -> int:
        for i, seg in enumerate(self.segments):
            if seg.kind == kind and seg.index == index:
                return i
        raise ContractError(f"no {'reference' if kind == REF else 'shot'} segment {index}")

    def token_range(self, kind: int, index: int) -> tuple[int, int]:
        i = self.segment_slot(kind, index)
        n = self.tokens_per_segment
        return i * n, (i + 1) * n

    def shot_slots(self) -> list[int]:
        """Storage slots of shots 0..S-1 in logical order."""
        return [self.segment_slot(SHOT, s) for s in range(self.S)]

    def with_latents(self, latents: np.ndarray) -> "TokenSequence":
        if latents.shape != self.latents.shape:
            raise ShapeError(f"latent shape {latents.shape} does not match {self.latents.shape}")
        return TokenSequence(latents, self.segments, self.strategy)

    def with_shot_latents(self, z_shot: np.ndarray) -> "TokenSequence":
        z = self.latents.copy()
        z[self.shot_slots()] = z_shot
        return self.with_latents(z)

    def shot_latents(self) -> np.ndarray:
        return self.latents[self.shot_slots()]


def build_token_sequence(z_ref, z_shot, strategy: str = "prepend", noise_flags=None,
                         phase_delta: float = np.pi / 4, neg_delta: int = 8) -> TokenSequence:
    """Lay out ``K`` reference and ``S`` shot latents under a positional strategy.

    ``noise_flags`` marks which shots are noised (default: all).
    References are always clean.
    """
    z_shot = np.asarray(z_shot)
    S = z_shot.shape[0]
    z_ref = np.zeros((0,) + z_shot.shape[1:], z_shot.dtype) if z_ref is None else np.asarray(z_ref)
    K = z_ref.shape[0]
    if S < 1:
        raise ContractError("a token sequence needs at least one shot")
    if z_ref.shape[1:] != z_shot.shape[1:]:
        raise ShapeError(f"reference latents {z_ref.shape} and shot latents {z_shot.shape} disagree")
    if K == 0 and strategy not in ("prepend",):
        raise ConfigError(f"strategy {strategy!r} places reference tokens but K=0")
    flags = [True] * S if noise_flags is None else [bool(f) for f in noise_flags]
    if len(flags) != S:
        raise ContractError(f"{len(flags)} noise flags for {S} shots")

    refs = [Segment(REF, k, 0.0, 0.0, False) for k in range(K)]
    shots = [Segment(SHOT, s, 0.0, 0.0, flags[s]) for s in range(S)]
    if strategy in ("prepend", "phase"):
        for k, seg in enumerate(refs):
            seg.t_idx = k
            seg.phase = phase_delta if strategy == "phase" else 0.0
        for s, seg in enumerate(shots):
            seg.t_idx = K + s
        order = refs + shots
    elif strategy == "append":
        for s, seg in enumerate(shots):
            seg.t_idx = s
        for k, seg in enumerate(refs):
            seg.t_idx = S + k
        order = shots + refs
    elif strategy == "negative":
        for k, seg in enumerate(refs):
            seg.t_idx = -neg_delta + k
        for s, seg in enumerate(shots):
            seg.t_idx = s
        order = refs + shots
    else:
        raise ConfigError(f"unknown positional strategy {strategy!r}")

    latents = np.concatenate([z_ref[seg.index][None] if seg.kind == REF else z_shot[seg.index][None]
                              for seg in order])
    return TokenSequence(latents, order, strategy)
