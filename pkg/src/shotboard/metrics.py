"""Oracle-based storyboard metrics and run reports.

* ``cids``      - identity consistency: cosine between oracle role descriptors,
  generated vs reference (cross) and across shots of the same role (self);
* ``csd``       - scene consistency: cosine between background colour histograms;
* ``alignment`` - fraction of script constraints the oracle can verify;
* ``attention_iou`` - overlap of aggregated attention maps with role masks.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .data.oracle import detect_roles, detect_scene, oracle_extract_role_feature
from .data.palette import KNOWN_KIND, snap
from .data.render import RoleSpec, scene_background
from .data.scripts import parse_reference_script, parse_shot_script
from .errors import ContractError

METRICS = ("cids_self", "cids_cross", "csd_self", "csd_cross", "alignment", "attn_iou")
CSV_FIELDS = ("sample_id",) + METRICS
HIST_BINS = 8


def cosine(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), 0.0, 1.0))


# -- identity -----------------------------------------------------------------------------

@dataclass
class CidsResult:
    self: float
    cross: float
    detected: int
    no_detection: bool = False


def cids(shots, references, placements) -> CidsResult:
    """Identity consistency of generated ``shots``.

    ``references`` holds one role per reference (``RoleSpec`` or an image the
    oracle reads); ``placements[s]`` maps role index to ``(quadrant, scale)``
    as stated by the script of shot ``s``.  A role missing from its stated
    quadrant scores 0.  ``self`` is NaN when no role occurs in two shots.
    """
    refs = [r if isinstance(r, RoleSpec) else oracle_extract_role_feature(np.asarray(r)) for r in references]
    found = [detect_roles(np.asarray(img)) for img in shots]
    cross, per_role = [], {}
    for s, placed in enumerate(placements):
        for k, (quad, _) in sorted(placed.items()):
            got = found[s].get(quad)
            ref = refs[k]
            cross.append(cosine(got.descriptor(), ref.descriptor()) if got is not None and ref is not None else 0.0)
            per_role.setdefault(k, []).append(got)
    pairs = []
    for occurrences in per_role.values():
        for a, b in combinations(occurrences, 2):
            pairs.append(cosine(a.descriptor(), b.descriptor()) if a is not None and b is not None else 0.0)
    detected = sum(len(f) for f in found)
    return CidsResult(
        self=float(np.mean(pairs)) if pairs else math.nan,
        cross=float(np.mean(cross)) if cross else 0.0,
        detected=detected,
        no_detection=detected == 0,
    )


# -- scene --------------------------------------------------------------------------------

def role_region(image) -> np.ndarray:
    """Pixels the oracle attributes to figures (role colours and white marks)."""
    kinds = KNOWN_KIND[snap(np.asarray(image))]
    return (kinds == "role") | (kinds == "white")


def background_histogram(image) -> np.ndarray:
    """Joint ``8×8×8`` colour histogram of the background pixels, flattened."""
    img = np.asarray(image)
    pix = img[~role_region(img)]
    if pix.size == 0:
        return np.zeros(HIST_BINS ** 3)
    idx = np.minimum(pix.astype(np.int64) * HIST_BINS // 256, HIST_BINS - 1)
    flat = (idx[:, 0] * HIST_BINS + idx[:, 1]) * HIST_BINS + idx[:, 2]
    return np.bincount(flat, minlength=HIST_BINS ** 3) / len(flat)


def csd(shots, scene: tuple[str, str] | None = None) -> tuple[float, float]:
    """``(self, cross)``: mean pairwise background cosine, and mean cosine to ``scene``."""
    hists = [background_histogram(s) for s in shots]
    pairs = [cosine(a, b) for a, b in combinations(hists, 2)]
    self_score = float(np.mean(pairs)) if pairs else 1.0
    if scene is None:
        return self_score, math.nan
    size = np.asarray(shots[0]).shape[0]
    ref = background_histogram(scene_background(scene[0], scene[1], size))
    return self_score, float(np.mean([cosine(h, ref) for h in hists]))


# -- script alignment -------------------------------------------------------------------------

def _same_look(a: RoleSpec | None, b: RoleSpec) -> bool:
    return a is not None and a.color == b.color and a.shape == b.shape


def shot_alignment(image, shot_script: str, roles: dict[int, RoleSpec]) -> tuple[int, int]:
    """``(satisfied, total)`` constraints for one shot.

    The scene is one constraint; each scripted role adds three: it is present
    somewhere, it is in the stated quadrant, and the figure standing for it
    has the stated colour and shape.
    """
    scene, placements = parse_shot_script(shot_script)
    found = detect_roles(np.asarray(image))
    ok = int(detect_scene(np.asarray(image)) == tuple(scene))
    total = 1
    for k, (quad, _) in sorted(placements.items()):
        if k not in roles:
            raise ContractError(f"shot script names role{k + 1} but no reference script describes it")
        role = roles[k]
        present = any(_same_look(d, role) for d in found.values())
        in_place = _same_look(found.get(quad), role)
        stand_in = found.get(quad) or next((d for d in found.values() if d.color == role.color), None)
        ok += int(present) + int(in_place) + int(_same_look(stand_in, role))
        total += 3
    return ok, total


def alignment_score(shots, shot_scripts, ref_scripts) -> float:
    roles = dict(parse_reference_script(s) for s in ref_scripts)
    if len(shots) != len(shot_scripts):
        raise ContractError(f"{len(shots)} shots for {len(shot_scripts)} scripts")
    scores = []
    for img, script in zip(shots, shot_scripts):
        ok, total = shot_alignment(img, script, roles)
        scores.append(ok / total)
    return float(np.mean(scores))


# -- attention ---------------------------------------------------------------------------------

def map_iou(attn, mask) -> float | None:
    """IoU of ``attn > mean(attn)`` with ``mask > 0.5``; ``None`` when the mask is empty."""
    a = np.asarray(attn, dtype=np.float64)
    m = np.asarray(mask) > 0.5
    if not m.any():
        return None
    b = a > a.mean()
    return float((b & m).sum() / (b | m).sum())


def attention_iou(maps: dict, masks: dict) -> float:
    """Mean IoU over ``(shot, role)`` keys present in both dicts."""
    vals = [v for key in sorted(maps) if key in masks and (v := map_iou(maps[key], masks[key])) is not None]
    return float(np.mean(vals)) if vals else math.nan


# -- reports -------------------------------------------------------------------------------------

def aggregate(rows: list[dict]) -> dict:
    out = {}
    for m in METRICS:
        vals = np.array([r[m] for r in rows], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        out[m] = float(vals.mean()) if vals.size else math.nan
    out["n"] = len(rows)
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 12))
    return str(v)


def rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in CSV_FIELDS])
    return buf.getvalue()


def json_safe(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    return obj


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


STABLE_SVG = {"svg.hashsalt": "shotboard", "svg.fonttype": "none"}


def loss_chart(history: list[dict], path, keys=("l_diff", "l_rac")) -> Path:
    """Training curves (100-step running mean) as a byte-stable SVG."""
    plt = _pyplot()
    with plt.rc_context(STABLE_SVG):
        fig, ax = plt.subplots(figsize=(6, 3))
        for key in keys:
            vals = np.array([r[key] for r in history], dtype=np.float64)
            if not vals.size or not np.any(vals):
                continue
            w = min(100, len(vals))
            smooth = np.convolve(vals, np.ones(w) / w, mode="valid")
            ax.plot(np.arange(w - 1, len(vals)), smooth, label=key)
        ax.set_xlabel("step")
        ax.set_yscale("log")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return Path(path)


def bar_chart(summaries: dict[str, dict], path, metrics=METRICS, title: str = "") -> Path:
    """Grouped bars, one group per metric and one bar per run; byte-stable SVG."""
    plt = _pyplot()
    names = list(summaries)
    x = np.arange(len(metrics))
    width = 0.8 / max(len(names), 1)
    with plt.rc_context(STABLE_SVG):
        fig, ax = plt.subplots(figsize=(7, 3.2))
        for i, name in enumerate(names):
            vals = [summaries[name].get(m, math.nan) for m in metrics]
            vals = [0.0 if v is None or (isinstance(v, float) and math.isnan(v)) else v for v in vals]
            ax.bar(x + (i - (len(names) - 1) / 2) * width, vals, width, label=name)
        ax.set_xticks(x)
        ax.set_xticklabels(metrics, fontsize=8)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("score")
        if title:
            ax.set_title(title)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return Path(path)


def report(runs: dict[str, list[dict]], out_dir, meta: dict | None = None, title: str = "") -> dict:
    """Write ``<run>.csv`` per run, ``summary.json`` and ``chart.svg``; return the summaries."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summaries = {}
    for name, rows in runs.items():
        (out / f"{name}.csv").write_text(rows_csv(rows))
        summaries[name] = aggregate(rows)
    (out / "summary.json").write_text(
        json.dumps(json_safe({"runs": summaries, "meta": meta or {}}), indent=2, sort_keys=True) + "\n")
    bar_chart(summaries, out / "chart.svg", title=title)
    return summaries


# -- model evaluation ------------------------------------------------------------------------------

PROBE_T = 0.5


def attention_maps(model, encoded, seed: int = 0, t: float = PROBE_T) -> tuple[dict, dict]:
    """Aggregated role-attention maps on the noised ground-truth shots at a fixed ``t``.

    Returns ``(maps, masks)`` keyed by ``(shot, role, "ref"|"shot")``.
    """
    from . import tensor as T
    from .racl import racl_terms

    z_n = T.normal(T.make_rng(seed), encoded.z_shot.shape, encoded.z_shot.dtype)
    z_t = ((1 - t) * encoded.z_shot + t * z_n).astype(encoded.z_shot.dtype)
    flags = [True] * encoded.S
    with T.no_grad():
        seq = model.sequence(encoded.z_ref, z_t, flags)
        _, rec = model.forward(seq, model.embed_scripts(encoded.ref_ids, encoded.shot_ids), t, capture=True)
        terms = racl_terms(rec, seq, encoded.masks, encoded.correspondences, warn=False)
    maps, masks = {}, {}
    for (s, k), pair in terms.items():
        for label, A, target in pair:
            maps[(s, k, label)] = A.data
            masks[(s, k, label)] = target
    return maps, masks


def score_shots(images, sample) -> dict:
    """Image-only metrics of ``images`` generated for ``sample``'s scripts."""
    c = cids(images, sample.roles, [shot.placements for shot in sample.shots])
    csd_self, csd_cross = csd(images, sample.scene)
    return {
        "cids_self": c.self, "cids_cross": c.cross, "csd_self": csd_self, "csd_cross": csd_cross,
        "alignment": alignment_score(images, sample.shot_scripts, sample.ref_scripts),
        "no_detection": c.no_detection,
    }


def evaluate_sample(model, codec, sample, sample_cfg, repeat: int = 4) -> dict:
    """Generate ``sample``'s shots from its references and scripts, then score them."""
    from .sampler import sample as generate
    from .train import encode_sample

    res = generate(model, codec, sample.shot_scripts, sample_cfg, sample.ref_images, sample.ref_scripts)
    row = {"sample_id": sample.sample_id, **score_shots(res.images, sample)}
    maps, masks = attention_maps(model, encode_sample(sample, codec, repeat), seed=sample_cfg.seed)
    row["attn_iou"] = attention_iou(maps, masks)
    row["images"] = res.images
    return row
