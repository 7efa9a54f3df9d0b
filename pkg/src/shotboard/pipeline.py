"""Storyboard extraction from frame streams.

Cuts come from colour-histogram jumps, one keyframe per shot is picked by
sharpness minus motion, and keyframes are grouped into storyboards by a
judge applied over overlapping windows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .data.oracle import detect_roles
from .data.palette import ROLE_COLORS, SCENE_COLORS
from .data.render import render_shot
from .data.synth import gen_role, read_ppm, write_json, write_ppm
from .errors import ContractError, ShapeError
from .tensor import make_rng

LUMA = np.array([0.299, 0.587, 0.114])
LAPLACIAN = np.array([[0, -1, 0], [-1, 4, -1], [0, -1, 0]], dtype=np.float64)
BINS = 16


def _float(image) -> np.ndarray:
    img = np.asarray(image)
    return img.astype(np.float64) / 255.0 if img.dtype == np.uint8 else img.astype(np.float64)


def luma(image) -> np.ndarray:
    return _float(image) @ LUMA


# -- cuts ------------------------------------------------------------------------------

def histogram(image) -> np.ndarray:
    """Per-channel normalized ``BINS``-bin histograms, shape C×BINS."""
    img = np.clip(_float(image), 0.0, 1.0)
    idx = np.minimum((img * BINS).astype(int), BINS - 1)
    n = idx.shape[0] * idx.shape[1]
    return np.stack([np.bincount(idx[..., c].ravel(), minlength=BINS) / n for c in range(idx.shape[2])])


def histogram_distance(a, b) -> float:
    """Channel-averaged L1 distance of normalized histograms, in [0, 2]."""
    return float(np.abs(histogram(a) - histogram(b)).sum(axis=1).mean())


def detect_cuts(frames: Sequence, threshold: float = 0.7) -> list[int]:
    """Indices ``i`` where frame ``i`` starts a new shot."""
    if len(frames) < 2:
        raise ContractError("cut detection needs at least two frames")
    if not 0 < threshold <= 2:
        raise ContractError(f"threshold must lie in (0, 2], got {threshold}")
    hists = [histogram(f) for f in frames]
    return [i for i in range(1, len(frames))
            if float(np.abs(hists[i] - hists[i - 1]).sum(axis=1).mean()) > threshold]


def shot_spans(n_frames: int, cuts: Sequence[int]) -> list[tuple[int, int]]:
    bounds = [0, *sorted(set(cuts)), n_frames]
    return [(a, b) for a, b in zip(bounds, bounds[1:]) if b > a]


# -- keyframes -----------------------------------------------------------------------------

def laplacian_sharpness(image) -> float:
    response = ndimage.convolve(luma(image), LAPLACIAN, mode="nearest")
    return float(response.var())


def motion_magnitude(f1, f2) -> float:
    a, b = np.asarray(f1), np.asarray(f2)
    if a.shape != b.shape:
        raise ShapeError(f"frames {a.shape} and {b.shape} differ")
    return float(np.abs(luma(a) - luma(b)).mean())


def select_keyframe(frames: Sequence, beta: float = 0.5) -> int:
    """Index maximizing sharpness − β·(mean motion to neighbours); earliest on ties."""
    n = len(frames)
    if n == 0:
        raise ContractError("a shot needs at least one frame")
    sharp = [laplacian_sharpness(f) for f in frames]
    step = [motion_magnitude(frames[i], frames[i + 1]) for i in range(n - 1)]
    scores = []
    for i in range(n):
        near = ([step[i - 1]] if i > 0 else []) + ([step[i]] if i < n - 1 else [])
        scores.append(sharp[i] - beta * (float(np.mean(near)) if near else 0.0))
    return int(np.argmax(scores))  # argmax returns the first maximum


# -- grouping ---------------------------------------------------------------------------------

Judge = Callable[[Sequence[int], Sequence], list]


def window_starts(n: int, window: int, overlap: int) -> list[int]:
    if window < 2 or not 1 <= overlap <= window - 1:
        raise ContractError(f"need window >= 2 and 1 <= overlap <= window-1, got W={window}, O={overlap}")
    if n <= window:
        return [0]
    stride = window - overlap
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] + window < n:
        starts.append(n - window)
    return starts


def sliding_window_group(keyframes: Sequence, judge: Judge, window: int = 6, overlap: int = 2) -> list[list[int]]:
    """Partition keyframe positions ``0..n-1`` into temporally ordered groups.

    ``judge(positions, images)`` returns one hashable label per keyframe in
    the window; labels are window-local.  On overlapping positions the label
    assigned by the earlier window is kept.
    """
    n = len(keyframes)
    if n == 0:
        return []
    labels: list[int | None] = [None] * n
    next_id = 0
    for start in window_starts(n, window, overlap):
        pos = list(range(start, min(start + window, n)))
        local = list(judge(pos, [keyframes[i] for i in pos]))
        if len(local) != len(pos):
            raise ContractError(f"judge returned {len(local)} labels for a window of {len(pos)}")
        mapping: dict = {}
        for i, lab in zip(pos, local):
            if labels[i] is not None:
                mapping.setdefault(lab, labels[i])
        for i, lab in zip(pos, local):
            if labels[i] is not None:
                continue
            if lab not in mapping:
                mapping[lab] = next_id
                next_id += 1
            labels[i] = mapping[lab]
    groups: list[list[int]] = []
    for i, lab in enumerate(labels):
        if groups and labels[groups[-1][-1]] == lab:
            groups[-1].append(i)
        else:
            groups.append([i])
    return groups


def oracle_judge(positions, images) -> list:
    """Label keyframes by the set of roles the oracle sees in them."""
    return [frozenset(detect_roles(img).values()) for img in images]


def file_judge(path) -> Judge:
    """Judge backed by a JSON file ``{"labels": [...]}`` indexed by keyframe position."""
    labels = json.loads(Path(path).read_text())["labels"]

    def judge(positions, images):
        try:
            return [labels[i] for i in positions]
        except IndexError as exc:
            raise ContractError(f"label file {path} has {len(labels)} entries") from exc

    return judge


# -- end to end ----------------------------------------------------------------------------------

@dataclass
class PipelineResult:
    cuts: list[int]
    shots: list[tuple[int, int]]
    keyframes: list[int]  # frame index per shot
    groups: list[list[int]]  # keyframe positions
    scores: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "cuts": self.cuts,
            "shots": [{"start": a, "end": b, "keyframe": k} for (a, b), k in zip(self.shots, self.keyframes)],
            "groups": [[self.keyframes[p] for p in g] for g in self.groups],
        }


def run_pipeline(frames: Sequence, judge: Judge, window: int = 6, overlap: int = 2,
                 threshold: float = 0.7, beta: float = 0.5) -> PipelineResult:
    cuts = detect_cuts(frames, threshold)
    shots = shot_spans(len(frames), cuts)
    keys = [a + select_keyframe(frames[a:b], beta) for a, b in shots]
    groups = sliding_window_group([frames[k] for k in keys], judge, window, overlap)
    return PipelineResult(cuts, shots, keys, groups)


def load_frames(directory) -> list[np.ndarray]:
    d = Path(directory)
    paths = sorted(p for p in d.iterdir() if p.suffix.lower() in (".ppm", ".png"))
    if not paths:
        raise ContractError(f"no .ppm or .png frames in {d}")
    return [read_ppm(p) for p in paths]


# -- synthetic streams -----------------------------------------------------------------------------

@dataclass
class StreamTruth:
    cuts: list[int]
    keyframes: list[int]
    scene_of_shot: list[int]

    def groups(self) -> list[list[int]]:
        out: list[list[int]] = []
        for pos, scene in enumerate(self.scene_of_shot):
            if out and self.scene_of_shot[out[-1][-1]] == scene:
                out[-1].append(pos)
            else:
                out.append([pos])
        return out


def box_blur(image: np.ndarray, passes: int = 1) -> np.ndarray:
    img = image.astype(np.float64)
    for _ in range(passes):
        img = ndimage.uniform_filter(img, size=(3, 3, 1), mode="nearest")
    return np.round(img).astype(np.uint8)


MIN_LUMA_CONTRAST = 40 / 255


def _contrast_ok(cast, color: str) -> bool:
    bg = luma(np.array([[SCENE_COLORS[color][0]]], np.uint8))[0, 0]
    return all(abs(luma(np.array([[ROLE_COLORS[r.color]]], np.uint8))[0, 0] - bg) >= MIN_LUMA_CONTRAST
               for r in cast)


def gen_stream(seed: int, n_scenes: int = 4, size: int = 48, shots_per_scene=(1, 3),
               frames_per_shot=(3, 6)) -> tuple[list[np.ndarray], StreamTruth]:
    """Frames of consecutive scenes; each scene keeps its cast, each shot its plain backdrop.

    Within a shot one frame is sharp and the rest are box-blurred and panned
    by a pixel per frame, so the sharp frame is the intended keyframe.
    Consecutive shots never share a backdrop colour, consecutive scenes never
    share a cast, and every role stands out from its backdrop in luma.
    """
    rng = make_rng(seed)
    colors = sorted(SCENE_COLORS)
    frames: list[np.ndarray] = []
    cuts, keys, scene_of_shot = [], [], []
    prev_cast: frozenset = frozenset()
    prev_color = None
    quads = ["topleft", "topright", "bottomleft", "bottomright"]
    for scene in range(n_scenes):
        while True:
            cast = [gen_role(rng, distinct_colors=True)]
            if rng.random() < 0.5:
                cast.append(gen_role(rng, exclude=cast, distinct_colors=True))
            usable = [c for c in colors if _contrast_ok(cast, c)]
            if frozenset(cast) != prev_cast and [c for c in usable if c != prev_color]:
                break
        prev_cast = frozenset(cast)
        for _ in range(int(rng.integers(shots_per_scene[0], shots_per_scene[1] + 1))):
            choices = [c for c in usable if c != prev_color]
            if not choices:  # a one-colour palette cannot cut on its own; end the scene early
                break
            color = str(choices[int(rng.integers(len(choices)))])
            prev_color = color
            order = rng.permutation(4)
            placements = {k: (quads[int(order[k])], "large") for k in range(len(cast))}
            base, _ = render_shot((color, "plain"), placements, cast, size)
            n = int(rng.integers(frames_per_shot[0], frames_per_shot[1] + 1))
            sharp = int(rng.integers(0, n))
            if frames:
                cuts.append(len(frames))
            keys.append(len(frames) + sharp)
            scene_of_shot.append(scene)
            for i in range(n):
                f = np.roll(base, i - sharp, axis=1)
                frames.append(f if i == sharp else box_blur(f))
    return frames, StreamTruth(cuts, keys, scene_of_shot)


def save_stream(frames, truth: StreamTruth, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        write_ppm(out / f"frame_{i:04d}.ppm", f)
    write_json(out / "truth.json", {"cuts": truth.cuts, "keyframes": truth.keyframes,
                                    "scene_of_shot": truth.scene_of_shot, "groups": truth.groups()})
    return out
