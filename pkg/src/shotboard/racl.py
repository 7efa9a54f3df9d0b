"""Role-attention consistency loss.

For each shot ``s`` and each role ``k`` present in it, self-attention from
the role's tokens elsewhere (its reference image, and its region in another
shot ``s'``) onto the tokens of shot ``s`` is aggregated into an ``h×w`` map
and pushed towards the role's mask in ``s`` with binary cross-entropy.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .model.tokens import REF, SHOT, TokenSequence
from .tensor import Tensor

MASK_FLOOR = 1e-4
PROB_FLOOR = 1e-6
QUERY_THRESHOLD = 0.5


def downsample_mask(mask, h: int, w: int) -> np.ndarray:
    """Area-average a pixel mask onto an ``h×w`` grid, clipped away from 0 and 1."""
    m = np.asarray(mask, dtype=np.float64)
    H, W = m.shape
    if H % h or W % w:
        raise ShapeError(f"mask {H}×{W} cannot be pooled onto {h}×{w}")
    pooled = m.reshape(h, H // h, w, W // w).mean(axis=(1, 3))
    return np.clip(pooled, MASK_FLOOR, 1.0 - MASK_FLOOR)


@dataclass
class RoleMaskSet:
    """Latent-resolution soft masks.

    ``refs[k]`` is the mask of reference ``k``; ``shots[(s, k)]`` the mask of
    role ``k`` in shot ``s`` (absent roles have no entry).
    """

    refs: dict[int, np.ndarray] = field(default_factory=dict)
    shots: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_pixels(cls, ref_masks, shot_masks, h: int, w: int) -> "RoleMaskSet":
        return cls(
            refs={k: downsample_mask(m, h, w) for k, m in enumerate(ref_masks)},
            shots={(s, k): downsample_mask(m, h, w)
                   for s, per in enumerate(shot_masks) for k, m in per.items()},
        )


@dataclass
class AggregationStats:
    skipped_empty_queries: int = 0
    pairs: int = 0


def aggregate(records, query_rows, key_range, renorm: bool = False) -> Tensor:
    """Mean attention from ``query_rows`` onto the keys in ``key_range``.

    Averaged over blocks, heads and query tokens; returns a flat map over the
    key range.  ``renorm`` rescales each row to sum to one over the key range.
    """
    query_rows = np.asarray(query_rows)
    if query_rows.size == 0:
        raise ContractError("empty query set")
    blocks = records.blocks if hasattr(records, "blocks") else list(records)
    n_tok = blocks[0].shape[-1]
    start, stop = key_range
    sel = np.zeros((1, n_tok), dtype=blocks[0].dtype)
    sel[0, query_rows] = 1.0 / query_rows.size
    total = None
    for probs in blocks:
        if renorm:
            rows = T.slice(T.take(probs, query_rows, axis=1), (slice(None), slice(None), (start, stop)))
            rows = rows / T.sum(rows, axis=-1, keepdims=True)
            part = T.mean(T.mean(rows, axis=1), axis=0)
        else:
            # selection-weighted row sum = sum over queries / |Q|
            picked = T.matmul(T.Tensor(sel), probs)  # heads×1×N
            part = T.mean(T.reshape(T.slice(picked, (slice(None), slice(None), (start, stop))),
                                    (probs.shape[0], stop - start)), axis=0)
        total = part if total is None else total + part
    return T.scale(total, 1.0 / len(blocks))


def _query_rows(seq: TokenSequence, kind: int, index: int, latent_mask: np.ndarray) -> np.ndarray:
    start, _ = seq.token_range(kind, index)
    return start + np.nonzero(latent_mask.reshape(-1) > QUERY_THRESHOLD)[0]


def aggregate_ref_to_shot(records, seq: TokenSequence, k: int, ref_mask: np.ndarray, s: int,
                          renorm: bool = False) -> Tensor:
    """Attention from reference ``k``'s role tokens onto shot ``s`` (``h×w``)."""
    h, w = seq.grid
    rows = _query_rows(seq, REF, k, ref_mask)
    return T.reshape(aggregate(records, rows, seq.token_range(SHOT, s), renorm), (h, w))


def aggregate_shot_to_shot(records, seq: TokenSequence, s_src: int, src_mask: np.ndarray, s: int,
                           renorm: bool = False) -> Tensor:
    """Attention from the role's tokens in shot ``s_src`` onto shot ``s``."""
    if s_src == s:
        raise ContractError("shot-to-shot aggregation needs two different shots")
    h, w = seq.grid
    rows = _query_rows(seq, SHOT, s_src, src_mask)
    return T.reshape(aggregate(records, rows, seq.token_range(SHOT, s), renorm), (h, w))


def bce(A: Tensor, m) -> Tensor:
    """Mean binary cross-entropy of map ``A`` against soft target ``m``."""
    m = np.asarray(m, dtype=A.dtype)
    if A.shape != m.shape:
        raise ShapeError(f"map {A.shape} and mask {m.shape} differ")
    a = T.clip(A, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return T.neg(T.mean(T.log(a) * m + T.log(1.0 - a) * (1.0 - m)))


def nearest_other_shot(shots_with_role, s: int) -> int | None:
    others = [o for o in shots_with_role if o != s]
    if not others:
        return None
    return min(others, key=lambda o: (abs(o - s), o))


def racl_terms(records, seq: TokenSequence, masks: RoleMaskSet, correspondences: dict,
               renorm: bool = False, stats: AggregationStats | None = None, warn: bool = True) -> dict:
    """Aggregated maps for every supervisable (shot, role) pair.

    Returns ``{(s, k): [(label, map, target), ...]}`` with up to two terms per
    pair; labels are ``"ref"`` and ``"shot"``.
    ``correspondences`` maps role ``k`` to ``{"ref": index or None, "shots": [...]}``.
    """
    stats = stats if stats is not None else AggregationStats()
    present_refs = {seg.index for seg in seq.segments if seg.kind == REF}
    terms: dict[tuple[int, int], list] = {}
    for s in range(seq.S):
        for k, corr in sorted(correspondences.items()):
            target = masks.shots.get((s, k))
            if target is None:
                continue
            pair = []
            ref = corr.get("ref")
            if ref is not None and ref in present_refs and ref in masks.refs:
                if (masks.refs[ref] > QUERY_THRESHOLD).any():
                    A = aggregate_ref_to_shot(records, seq, ref, masks.refs[ref], s, renorm)
                    pair.append(("ref", A, target))
                else:
                    stats.skipped_empty_queries += 1
            occurs = [o for o in corr.get("shots", []) if o < seq.S and (o, k) in masks.shots]
            s_src = nearest_other_shot(occurs, s)
            if s_src is not None:
                src = masks.shots[(s_src, k)]
                if (src > QUERY_THRESHOLD).any():
                    A = aggregate_shot_to_shot(records, seq, s_src, src, s, renorm)
                    pair.append(("shot", A, target))
                else:
                    stats.skipped_empty_queries += 1
            if pair:
                terms[(s, k)] = pair
                stats.pairs += 1
    if warn and stats.skipped_empty_queries:
        warnings.warn(f"{stats.skipped_empty_queries} role query sets vanished under pooling", stacklevel=2)
    return terms


def combine_terms(terms: dict) -> Tensor:
    """``(1/S) Σ_s (1/K) Σ_k Σ_terms BCE`` over supervised shots and roles only."""
    if not terms:
        raise ContractError("no supervisable (shot, role) pair for the role-attention loss")
    by_shot: dict[int, list] = {}
    for (s, k), pair in sorted(terms.items()):
        pair_loss = None
        for _, A, m in pair:
            b = bce(A, m)
            pair_loss = b if pair_loss is None else pair_loss + b
        by_shot.setdefault(s, []).append(pair_loss)
    total = None
    for s, losses in sorted(by_shot.items()):
        shot_loss = losses[0]
        for extra in losses[1:]:
            shot_loss = shot_loss + extra
        shot_loss = T.scale(shot_loss, 1.0 / len(losses))
        total = shot_loss if total is None else total + shot_loss
    return T.scale(total, 1.0 / len(by_shot))


def racl_loss(records, seq: TokenSequence, masks: RoleMaskSet, correspondences: dict,
              renorm: bool = False) -> Tensor:
    return combine_terms(racl_terms(records, seq, masks, correspondences, renorm))


def has_supervision(masks: RoleMaskSet, correspondences: dict, K: int, S: int) -> bool:
    """Whether an instance offers at least one supervisable pair."""
    for k, corr in correspondences.items():
        shots = [s for s in corr.get("shots", []) if s < S and (s, k) in masks.shots]
        if not shots:
            continue
        ref = corr.get("ref")
        if ref is not None and ref < K and (masks.refs.get(ref, np.zeros(1)) > QUERY_THRESHOLD).any():
            return True
        if len(shots) >= 2 and any((masks.shots[(s, k)] > QUERY_THRESHOLD).any() for s in shots):
            return True
    return False


def dump_maps(terms: dict, out_dir) -> list[str]:
    """Write each aggregated map as DSTN plus a grayscale PPM heatmap."""
    from pathlib import Path

    from .data.synth import write_ppm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for (s, k), pair in sorted(terms.items()):
        for label, A, _ in pair:
            name = f"shot{s}_role{k}_{label}"
            T.save_tensor(out / f"{name}.dstn", A.data)
            a = A.data / max(float(A.data.max()), 1e-12)
            img = np.repeat(np.kron(a, np.ones((8, 8)))[..., None], 3, axis=-1)
            write_ppm(out / f"{name}.ppm", img)
            written.append(name)
    return written
