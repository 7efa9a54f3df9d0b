"""Paired-seed ablation studies.

Every arm of a study trains (or reuses) one model per seed with identical
data, initialization seed and random streams; only the studied field
differs.  Arms that differ in sampling settings alone share the trained
model of their seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from .codec import PatchCodec
from .errors import ConfigError
from .metrics import METRICS, evaluate_sample, json_safe, report
from .model import DiT, ModelConfig
from .sampler import SampleConfig
from .train import TrainConfig, encode_dataset, train_loop


@dataclass(frozen=True)
class Arm:
    name: str
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    sample: dict = field(default_factory=dict)


STUDIES: dict[str, tuple[Arm, ...]] = {
    "racl": (Arm("lambda_0", train={"lam": 0.0}), Arm("lambda_0.2", train={"lam": 0.2})),
    "position": (Arm("prepend", model={"strategy": "prepend"}), Arm("phase", model={"strategy": "phase"})),
    "cfg": (Arm("omega1_1", sample={"omega1": 1.0}), Arm("omega1_4", sample={"omega1": 4.0})),
    "lambda": tuple(Arm(f"lambda_{v:g}", train={"lam": v}) for v in (0.0, 0.05, 0.2, 0.5)),
}


@dataclass
class StudyResult:
    study: str
    arms: list[str]
    rows: dict[str, dict[int, list[dict]]]  # arm -> seed -> per-sample rows

    def seed_means(self, arm: str, metric: str) -> np.ndarray:
        out = []
        for seed in sorted(self.rows[arm]):
            vals = np.array([r[metric] for r in self.rows[arm][seed]], dtype=np.float64)
            vals = vals[~np.isnan(vals)]
            out.append(vals.mean() if vals.size else math.nan)
        return np.array(out)

    def paired(self, base: str, other: str, metric: str) -> dict:
        return sign_test(self.seed_means(other, metric) - self.seed_means(base, metric))


def sign_test(diffs) -> dict:
    """One-sided sign test that the paired differences are positive; ties are dropped."""
    d = np.asarray(diffs, dtype=np.float64)
    d = d[~np.isnan(d)]
    wins, losses = int((d > 0).sum()), int((d < 0).sum())
    n = wins + losses
    p = binomtest(wins, n, 0.5, alternative="greater").pvalue if n else 1.0
    return {"mean_diff": float(d.mean()) if d.size else math.nan, "wins": wins, "losses": losses,
            "ties": int(d.size - n), "p_value": float(p)}


def _key(model_cfg: ModelConfig, train_cfg: TrainConfig) -> str:
    return json.dumps([model_cfg.to_dict(), train_cfg.to_dict()], sort_keys=True)


def run_study(study: str, train_samples, eval_samples, codec: PatchCodec, model_cfg: ModelConfig,
              train_cfg: TrainConfig, sample_cfg: SampleConfig, seeds, out_dir=None, repeat: int = 4,
              progress=None, arms: tuple[Arm, ...] | None = None) -> StudyResult:
    """Train and evaluate every arm for every seed; write a paired report under ``out_dir``."""
    arms = arms or STUDIES.get(study)
    if not arms:
        raise ConfigError(f"unknown study {study!r}; choose from {sorted(STUDIES)}")
    data = encode_dataset(train_samples, codec, repeat)
    out = Path(out_dir) if out_dir is not None else None
    rows: dict[str, dict[int, list[dict]]] = {a.name: {} for a in arms}
    for seed in seeds:
        trained: dict[str, DiT] = {}
        for arm in arms:
            mcfg = replace(model_cfg, init_seed=seed, **arm.model).validate()
            tcfg = replace(train_cfg, seed=seed, **arm.train).validate()
            key = _key(mcfg, tcfg)
            if key not in trained:
                run_dir = None if out is None else out / "runs" / f"{arm.name}_seed{seed}"
                trained[key] = train_loop(DiT(mcfg), data, tcfg, run_dir).model
            scfg = replace(sample_cfg, seed=seed, **arm.sample).validate()
            arm_rows = []
            for s in eval_samples:
                row = evaluate_sample(trained[key], codec, s, scfg, repeat)
                row.pop("images")
                arm_rows.append(row)
            rows[arm.name][seed] = arm_rows
            if progress is not None:
                progress(arm.name, seed)
    result = StudyResult(study, [a.name for a in arms], rows)
    if out is not None:
        write_study(result, out)
    return result


def write_study(result: StudyResult, out_dir) -> dict:
    """Per-arm CSV/JSON/SVG via :func:`report`, plus ``paired.json`` against the first arm."""
    out = Path(out_dir)
    flat = {arm: [dict(r, sample_id=f"seed{seed}/{r['sample_id']}")
                  for seed in sorted(by_seed) for r in by_seed[seed]]
            for arm, by_seed in result.rows.items()}
    report(flat, out, meta={"study": result.study}, title=f"{result.study} study")
    base = result.arms[0]
    paired = {other: {m: result.paired(base, other, m) for m in METRICS} for other in result.arms[1:]}
    summary = {"study": result.study, "base": base, "seeds": sorted(next(iter(result.rows.values()))),
               "paired": paired}
    (out / "paired.json").write_text(json.dumps(json_safe(summary), indent=2, sort_keys=True) + "\n")
    return summary
