"""Mixed-mode flow-matching training.

Every step draws one generation mode for the whole batch:

* ``ReferenceToShot`` - references clean, every shot noised at one shared ``t``;
* ``TextToShot``      - no references, every shot noised at one shared ``t``;
* ``ShotToShot``      - no references, the first ``m`` shots clean as
  conditions and the rest noised.

The model regresses ``ε = z_n − z_shot`` on noised shots.  While
``step < racl_until_step`` and ``λ > 0`` the role-attention loss is added
with weight ``λ``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import PatchCodec, encode_references, encode_shots
from .data.scripts import tokenize
from .errors import ConfigError, ContractError, ModeError, TrainingError
from .model import DiT, ModelConfig
from .racl import RoleMaskSet, combine_terms, has_supervision, racl_terms
from .tensor import Tensor

TEXT, REFERENCE, SHOT = "TextToShot", "ReferenceToShot", "ShotToShot"
MODES = (TEXT, REFERENCE, SHOT)
T_MIN, T_MAX = 1e-4, 1 - 1e-4
CSV_FIELDS = ("step", "mode", "l_diff", "l_rac", "l_total", "wallclock_ms")
ENABLE_RACL = True  # compile-time switch; False removes every role-attention code path


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.2
    racl_until_step: int = 10_000
    mode_probs: tuple = (1 / 3, 1 / 3, 1 / 3)  # TextToShot, ReferenceToShot, ShotToShot
    text_drop_rate: float = 0.1
    ref_drop_rate: float = 0.1
    lr: float = 1e-3
    lr_schedule: str = "constant"  # or "cosine"
    steps: int = 1000
    batch_size: int = 4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_grad_norm: float = 0.0  # 0 disables clipping
    checkpoint_every: int = 0  # 0 writes only the final checkpoint
    loss_norm: str = "l2"
    repeat: int = 4  # codec frame repetition T
    racl_renorm: bool = False

    def validate(self) -> "TrainConfig":
        probs = tuple(float(p) for p in self.mode_probs)
        if len(probs) != 3 or any(p < 0 for p in probs) or abs(sum(probs) - 1) > 1e-6:
            raise ConfigError(f"mode_probs must be three non-negative numbers summing to 1, got {probs}")
        for name in ("text_drop_rate", "ref_drop_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("steps >= 0, batch_size >= 1 and lr > 0 are required")
        if self.loss_norm not in ("l2", "l1"):
            raise ConfigError(f"loss_norm must be 'l2' or 'l1', got {self.loss_norm!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode_probs"] = list(self.mode_probs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "mode_probs" in d:
            d["mode_probs"] = tuple(d["mode_probs"])
        return cls(**d).validate()


# -- data ------------------------------------------------------------------------------

@dataclass
class EncodedSample:
    sample_id: str
    z_ref: np.ndarray  # K×d×h×w
    z_shot: np.ndarray  # S×d×h×w
    ref_ids: list[list[int]]
    shot_ids: list[list[int]]
    masks: RoleMaskSet
    correspondences: dict

    @property
    def K(self) -> int:
        return len(self.z_ref)

    @property
    def S(self) -> int:
        return len(self.z_shot)


def encode_sample(sample, codec: PatchCodec, repeat: int = 4, dtype=np.float32) -> EncodedSample:
    z_shot = encode_shots(sample.shot_images, codec, repeat).values.astype(dtype)
    refs = encode_references(sample.ref_images, codec)
    h, w = z_shot.shape[2:]
    return EncodedSample(
        sample_id=sample.sample_id,
        z_ref=refs.values.astype(dtype) if refs is not None else np.zeros((0,) + z_shot.shape[1:], dtype),
        z_shot=z_shot,
        ref_ids=[tokenize(s) for s in sample.ref_scripts],
        shot_ids=[tokenize(s) for s in sample.shot_scripts],
        masks=RoleMaskSet.from_pixels(sample.ref_masks, sample.shot_masks, h, w),
        correspondences=sample.correspondences(),
    )


def encode_dataset(samples, codec: PatchCodec, repeat: int = 4) -> list[EncodedSample]:
    if not samples:
        raise ConfigError("the training set is empty")
    return [encode_sample(s, codec, repeat) for s in samples]


@dataclass
class TrainingInstance:
    mode: str
    sample_id: str
    t: float
    z_ref: np.ndarray | None
    z_shot: np.ndarray
    z_n: np.ndarray
    z_t: np.ndarray
    flags: list[bool]
    target: np.ndarray
    ref_ids: list[list[int]]
    shot_ids: list[list[int]]
    masks: RoleMaskSet
    correspondences: dict
    dropped: tuple[bool, bool] = (False, False)

    @property
    def K(self) -> int:
        return 0 if self.z_ref is None else len(self.z_ref)

    @property
    def S(self) -> int:
        return len(self.z_shot)

    def segment_flags(self) -> list[int]:
        """Noise flags over the whole sequence, references first."""
        return [0] * self.K + [int(f) for f in self.flags]


def sample_timestep(rng) -> float:
    return float(np.clip(rng.random(), T_MIN, T_MAX))


def noise_latents(z_shot, z_n, t: float, flags=None) -> np.ndarray:
    """``(1−t)·z_shot + t·z_n`` on flagged shots; unflagged shots stay clean."""
    z_shot, z_n = np.asarray(z_shot), np.asarray(z_n)
    if z_shot.shape != z_n.shape:
        raise ContractError(f"clean {z_shot.shape} and noise {z_n.shape} shapes differ")
    mixed = (1 - t) * z_shot + t * z_n
    if flags is None:
        return mixed
    keep = np.asarray(flags, dtype=bool).reshape((-1,) + (1,) * (z_shot.ndim - 1))
    return np.where(keep, mixed, z_shot).astype(z_shot.dtype)


def _without_refs(masks: RoleMaskSet, corr: dict) -> tuple[RoleMaskSet, dict]:
    return (RoleMaskSet(refs={}, shots=dict(masks.shots)),
            {k: {"ref": None, "shots": list(v["shots"])} for k, v in corr.items()})


def make_training_instance(sample: EncodedSample, mode: str, rng) -> TrainingInstance:
    if mode not in MODES:
        raise ModeError(f"unknown mode {mode!r}; choose from {MODES}")
    S = sample.S
    if mode == SHOT and S < 2:
        raise ModeError("ShotToShot needs at least two shots")
    t = sample_timestep(rng)
    z_n = T.normal(rng, sample.z_shot.shape, sample.z_shot.dtype)
    if mode == SHOT:
        m = int(rng.integers(1, S))
        flags = [False] * m + [True] * (S - m)
    else:
        flags = [True] * S
    z_t = noise_latents(sample.z_shot, z_n, t, flags)
    on = np.asarray(flags).reshape(-1, 1, 1, 1)
    target = np.where(on, z_n - sample.z_shot, 0).astype(sample.z_shot.dtype)
    if not np.array_equal(target[on[:, 0, 0, 0]], (z_n - sample.z_shot)[on[:, 0, 0, 0]]):
        raise ContractError("velocity target differs from z_n - z_shot on a noised shot")
    masks, corr = sample.masks, sample.correspondences
    keep_refs = mode == REFERENCE and sample.K > 0
    if not keep_refs:
        masks, corr = _without_refs(masks, corr)
    return TrainingInstance(
        mode=mode, sample_id=sample.sample_id, t=t,
        z_ref=sample.z_ref if keep_refs else None,
        z_shot=sample.z_shot, z_n=z_n, z_t=z_t, flags=flags, target=target,
        ref_ids=[list(x) for x in sample.ref_ids] if keep_refs else [],
        shot_ids=[list(x) for x in sample.shot_ids],
        masks=masks, correspondences=corr,
    )


def condition_dropout(inst: TrainingInstance, rng, text_rate: float, ref_rate: float) -> TrainingInstance:
    """Independently null the shot scripts and/or drop the references."""
    u_text, u_ref = rng.random(2)
    drop_text, drop_ref = bool(u_text < text_rate), bool(u_ref < ref_rate)
    if not (drop_text or drop_ref):
        return inst
    out = replace(inst, dropped=(drop_text, drop_ref))
    if drop_text:
        out.shot_ids = [[] for _ in inst.shot_ids]
    if drop_ref and inst.K:
        out.masks, out.correspondences = _without_refs(inst.masks, inst.correspondences)
        out.z_ref, out.ref_ids = None, []
    return out


def diff_loss(pred: Tensor, target, flags, norm: str = "l2") -> Tensor:
    """Mean (squared or absolute) error over the noised shots only."""
    idx = [i for i, f in enumerate(flags) if f]
    if not idx:
        raise ContractError("no noised shot to supervise")
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ContractError(f"prediction {pred.shape} and target {target.shape} differ")
    p = T.take(pred, idx, axis=0) if len(idx) < len(flags) else pred
    err = p - T.Tensor(target[idx].astype(pred.dtype))
    if norm == "l1":
        return T.mean(T.sqrt(T.square(err) + 1e-12))
    return T.mean(T.square(err))


# -- optimization ------------------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def lr_at(self, step: int) -> float:
        if self.cfg.lr_schedule == "cosine" and self.cfg.steps > 0:
            return self.cfg.lr * 0.5 * (1 + math.cos(math.pi * min(step, self.cfg.steps) / self.cfg.steps))
        return self.cfg.lr

    def step(self, step: int) -> float:
        cfg = self.cfg
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        scale = 1.0
        if cfg.max_grad_norm > 0 and norm > cfg.max_grad_norm:
            scale = cfg.max_grad_norm / norm
        self.t += 1
        lr = self.lr_at(step)
        b1, b2 = cfg.beta1, cfg.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] * scale if scale != 1.0 else grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + cfg.adam_eps)
            p.data = (p.data - update).astype(p.data.dtype)
            p.grad = None
        return norm


# -- steps and loop --------------------------------------------------------------------------------

def train_step(model: DiT, batch: list[TrainingInstance], cfg: TrainConfig, step: int,
               optimizer: Adam | None = None) -> dict:
    """One optimizer update over ``batch``; returns the scalar losses."""
    use_racl = ENABLE_RACL and cfg.lam > 0 and step < cfg.racl_until_step
    with T.Tape():
        l_diff_terms, l_rac_terms = [], []
        for inst in batch:
            capture = use_racl and has_supervision(inst.masks, inst.correspondences, inst.K, inst.S)
            seq = model.sequence(inst.z_ref, inst.z_t, inst.flags)
            scripts = model.embed_scripts(inst.ref_ids, inst.shot_ids)
            pred, rec = model.forward(seq, scripts, inst.t, capture=capture)
            l_diff_terms.append(diff_loss(pred, inst.target, inst.flags, cfg.loss_norm))
            if capture:
                terms = racl_terms(rec, seq, inst.masks, inst.correspondences, cfg.racl_renorm, warn=False)
                if terms:
                    l_rac_terms.append(combine_terms(terms))
        l_diff = _mean(l_diff_terms)
        total = l_diff
        l_rac_value = 0.0
        if l_rac_terms:
            l_rac = _mean(l_rac_terms)
            l_rac_value = l_rac.item()
            total = l_diff + T.scale(l_rac, cfg.lam)
        value = total.item()
        if not math.isfinite(value):
            modes = sorted({i.mode for i in batch})
            ts = [round(i.t, 6) for i in batch]
            raise TrainingError(f"non-finite loss {value} at step {step} (mode {modes}, t {ts})")
        T.backward(total)
    grad_norm = optimizer.step(step) if optimizer is not None else float("nan")
    return {"l_diff": l_diff.item(), "l_rac": l_rac_value, "l_total": value, "grad_norm": grad_norm}


def _mean(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return T.scale(total, 1.0 / len(terms)) if len(terms) > 1 else total


def draw_batch(dataset: list[EncodedSample], cfg: TrainConfig, rng) -> tuple[str, list[TrainingInstance]]:
    mode = MODES[int(rng.choice(3, p=np.asarray(cfg.mode_probs, dtype=np.float64)))]
    n = len(dataset)
    picks = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
    batch = []
    for i in picks:
        sample = dataset[int(i)]
        m = mode if not (mode == SHOT and sample.S < 2) else REFERENCE
        inst = make_training_instance(sample, m, rng)
        batch.append(condition_dropout(inst, rng, cfg.text_drop_rate, cfg.ref_drop_rate))
    return mode, batch


@dataclass
class TrainState:
    model: DiT
    optimizer: Adam
    rng: np.random.Generator
    step: int = 0
    history: list[dict] = field(default_factory=list)


def new_state(model: DiT, cfg: TrainConfig) -> TrainState:
    return TrainState(model, Adam(model.params, cfg), T.make_rng(cfg.seed))


def save_state(state: TrainState, cfg: TrainConfig, directory, extra: dict | None = None):
    meta = {
        "step": state.step,
        "model_config": state.model.config.to_dict(),
        "train_config": cfg.to_dict(),
        "rng_state": state.rng.bit_generator.state,
        "adam_t": state.optimizer.t,
        **(extra or {}),
    }
    groups = {
        "params": {k: p.data for k, p in state.model.params.items()},
        "adam_m": state.optimizer.m,
        "adam_v": state.optimizer.v,
    }
    return save_checkpoint(directory, groups, meta)


def load_state(directory, cfg: TrainConfig | None = None) -> tuple[TrainState, TrainConfig]:
    groups, meta = load_checkpoint(directory)
    model_cfg = ModelConfig.from_dict(meta["model_config"])
    cfg = cfg or TrainConfig.from_dict(meta["train_config"])
    params = {k: Tensor(groups["params"][k], requires_grad=True) for k in groups["params"]}
    model = DiT(model_cfg, params)
    state = new_state(model, cfg)
    state.optimizer.m = {k: groups["adam_m"][k].copy() for k in params}
    state.optimizer.v = {k: groups["adam_v"][k].copy() for k in params}
    state.optimizer.t = meta["adam_t"]
    state.rng.bit_generator.state = meta["rng_state"]
    state.step = meta["step"]
    return state, cfg


def load_model(directory) -> DiT:
    groups, meta = load_checkpoint(directory)
    cfg = ModelConfig.from_dict(meta["model_config"])
    return DiT(cfg, {k: Tensor(v, requires_grad=True) for k, v in groups["params"].items()})


def _format(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def _write_metrics(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow([_format(r[f]) for f in CSV_FIELDS])
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    tmp.replace(path)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["step"] = int(r["step"])
        for k in ("l_diff", "l_rac", "l_total", "wallclock_ms"):
            r[k] = float(r[k])
    return rows


def train_loop(model: DiT, dataset: list[EncodedSample], cfg: TrainConfig, out_dir=None,
               state: TrainState | None = None, until: int | None = None, extra_meta: dict | None = None,
               progress=None) -> TrainState:
    """Train until ``until`` (default ``cfg.steps``); resumable from ``state``.

    With ``out_dir`` the loop writes ``metrics.csv`` and checkpoints
    ``ckpt_<step>`` every ``checkpoint_every`` steps plus ``final``.
    """
    cfg = cfg.validate()
    if not dataset:
        raise ConfigError("the training set is empty")
    state = state or new_state(model, cfg)
    until = cfg.steps if until is None else until
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = out / "metrics.csv"
        if state.step > 0 and metrics.exists() and not state.history:
            state.history = [r for r in read_metrics(metrics) if r["step"] < state.step]
    while state.step < until:
        t0 = time.perf_counter()
        mode, batch = draw_batch(dataset, cfg, state.rng)
        losses = train_step(state.model, batch, cfg, state.step, state.optimizer)
        row = {"step": state.step, "mode": mode, **losses,
               "wallclock_ms": round((time.perf_counter() - t0) * 1000.0, 3)}
        state.history.append(row)
        state.step += 1
        if progress is not None:
            progress(row)
        if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            _write_metrics(out / "metrics.csv", state.history)
            save_state(state, cfg, out / f"ckpt_{state.step:06d}", extra_meta)
    if out is not None:
        _write_metrics(out / "metrics.csv", state.history)
        save_state(state, cfg, out / "final", extra_meta)
    return state


def loss_curve(history: list[dict], key: str = "l_diff") -> np.ndarray:
    return np.array([r[key] for r in history])


def config_json(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
