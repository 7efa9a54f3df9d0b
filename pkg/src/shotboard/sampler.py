"""Reference-free classifier-free guidance and flow-ODE sampling.

Each step evaluates the model three times on the same ``z_t`` and ``t``:

* ``v_uncond`` - no image condition, null shot scripts;
* ``v_refneg`` - image condition present, null shot scripts;
* ``v_refpos`` - image condition present, real shot scripts;

and combines them as ``v_uncond + ω1·(v_refneg − v_uncond) + ω2·(v_refpos − v_refneg)``.
The image condition is the reference set, or in ShotToShot the clean
preceding shots.  Without any image condition ``v_refneg`` equals
``v_uncond`` and is not recomputed.  Integration runs from t=1 to t=0 with
``z ← z − dt·v``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .codec import PatchCodec, decode, encode_references, encode_shots, to_uint8
from .data.scripts import tokenize
from .data.synth import write_json, write_ppm
from .errors import ConfigError, ContractError, UsageError
from .model import DiT
from .train import MODES, REFERENCE, SHOT, TEXT


@dataclass(frozen=True)
class SampleConfig:
    omega1: float = 4.0
    omega2: float = 5.0
    num_steps: int = 50
    seed: int = 0
    mode: str = REFERENCE

    def validate(self) -> "SampleConfig":
        if self.num_steps < 1:
            raise ConfigError(f"num_steps must be >= 1, got {self.num_steps}")
        if not (np.isfinite(self.omega1) and np.isfinite(self.omega2)):
            raise ConfigError("guidance weights must be finite")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        return self


@dataclass
class GuidanceOutputs:
    v_uncond: np.ndarray
    v_refneg: np.ndarray
    v_refpos: np.ndarray


def guided_velocity(g: GuidanceOutputs, omega1: float, omega2: float) -> np.ndarray:
    shapes = {g.v_uncond.shape, g.v_refneg.shape, g.v_refpos.shape}
    if len(shapes) != 1:
        raise ContractError(f"guidance outputs disagree in shape: {sorted(shapes)}")
    u = np.asarray(g.v_uncond, dtype=np.float64)
    n = np.asarray(g.v_refneg, dtype=np.float64)
    p = np.asarray(g.v_refpos, dtype=np.float64)
    return u + omega1 * (n - u) + omega2 * (p - n)


def euler_step(z: np.ndarray, v: np.ndarray, t: float, dt: float) -> np.ndarray:
    """One explicit step from ``t`` towards ``t − dt`` (``t`` itself is unused by Euler)."""
    return z - dt * v


def integrate(field_fn, z: np.ndarray, num_steps: int) -> np.ndarray:
    """Euler-integrate ``dz/dt = field_fn(z, t)`` from t=1 down to t=0."""
    dt = 1.0 / num_steps
    for i in range(num_steps):
        z = euler_step(z, field_fn(z, 1.0 - i * dt), 1.0 - i * dt, dt)
    return z


@dataclass
class Conditions:
    """Encoded inputs for one storyboard."""

    shot_ids: list[list[int]]
    z_ref: np.ndarray | None = None
    ref_ids: list[list[int]] = field(default_factory=list)
    z_pre: np.ndarray | None = None  # clean preceding shots (ShotToShot)

    @property
    def K(self) -> int:
        return 0 if self.z_ref is None else len(self.z_ref)

    @property
    def m(self) -> int:
        return 0 if self.z_pre is None else len(self.z_pre)

    @property
    def S(self) -> int:
        return len(self.shot_ids)

    @property
    def has_image_condition(self) -> bool:
        return self.K > 0 or self.m > 0


@dataclass
class SampleResult:
    latents: np.ndarray  # generated shots only
    images: list[np.ndarray]  # H×W×C uint8, generated shots only
    condition_images: list[np.ndarray]
    step_norms: list[float]
    calls: int
    config: SampleConfig
    scripts: list[str] = field(default_factory=list)


def _velocity(model: DiT, z_ref, ref_ids, z_shots, flags, shot_ids, t):
    seq = model.sequence(z_ref, z_shots, flags)
    vel, _ = model.forward(seq, model.embed_scripts(ref_ids, shot_ids), t)
    return vel.data


def guidance_outputs(model: DiT, cond: Conditions, z: np.ndarray, t: float,
                     skip_degenerate: bool = True) -> GuidanceOutputs:
    """The three guidance velocities for the noised shots ``z``."""
    m, S = cond.m, cond.S
    null = [[] for _ in range(S)]
    full = z if m == 0 else np.concatenate([cond.z_pre, z]).astype(z.dtype)
    flags = [False] * m + [True] * (S - m)
    # no image condition: references and preceding shots both gone
    v_uncond = _velocity(model, None, [], z, None, null[m:], t)
    if cond.has_image_condition or not skip_degenerate:
        v_refneg = _velocity(model, cond.z_ref, cond.ref_ids, full, flags, null, t)[m:]
    else:
        v_refneg = v_uncond
    v_refpos = _velocity(model, cond.z_ref, cond.ref_ids, full, flags, cond.shot_ids, t)[m:]
    return GuidanceOutputs(v_uncond, v_refneg, v_refpos)


def initial_noise(cond: Conditions, model: DiT, seed: int) -> np.ndarray:
    g = model.config.grid
    return T.normal(T.make_rng(seed), (cond.S - cond.m, model.config.latent_dim, g, g), model.dtype)


def sample_latents(model: DiT, cond: Conditions, cfg: SampleConfig, skip_degenerate: bool = True):
    """Guided sampling; returns (generated latents, per-step velocity norms)."""
    cfg = cfg.validate()
    z = initial_noise(cond, model, cfg.seed)
    norms = []

    def field_fn(z, t):
        v = guided_velocity(guidance_outputs(model, cond, z.astype(model.dtype), t, skip_degenerate),
                            cfg.omega1, cfg.omega2)
        norms.append(float(np.sqrt(np.mean(v * v))))
        return v

    with T.no_grad():
        z = integrate(field_fn, z.astype(np.float64), cfg.num_steps)
    return z.astype(model.dtype), norms


def sample_latents_positive(model: DiT, cond: Conditions, cfg: SampleConfig):
    """Unguided sampling with the full conditions only (one pass per step)."""
    cfg = cfg.validate()
    z = initial_noise(cond, model, cfg.seed)
    m, S = cond.m, cond.S
    flags = [False] * m + [True] * (S - m)

    def field_fn(z, t):
        full = z if m == 0 else np.concatenate([cond.z_pre, z])
        v = _velocity(model, cond.z_ref, cond.ref_ids, full.astype(model.dtype), flags, cond.shot_ids, t)
        return np.asarray(v[m:], dtype=np.float64)

    with T.no_grad():
        z = integrate(field_fn, z.astype(np.float64), cfg.num_steps)
    return z.astype(model.dtype)


def _as_ids(scripts) -> list[list[int]]:
    return [tokenize(s) if isinstance(s, str) else [int(i) for i in s] for s in scripts]


def build_conditions(codec: PatchCodec, mode: str, shot_scripts, ref_images=None, ref_scripts=None,
                     preceding_shots=None, repeat: int = 4) -> Conditions:
    """Check mode prerequisites and encode the inputs."""
    ref_images = list(ref_images or [])
    ref_scripts = list(ref_scripts or [])
    preceding = list(preceding_shots or [])
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; choose from {MODES}")
    if mode == REFERENCE and not ref_images:
        raise UsageError("ReferenceToShot needs at least one reference image")
    if mode == SHOT and not preceding:
        raise UsageError("ShotToShot needs at least one preceding shot")
    if mode == TEXT and preceding:
        raise UsageError("TextToShot does not take preceding shots")
    if mode != REFERENCE and ref_images:
        raise UsageError(f"{mode} does not take reference images")
    if len(ref_scripts) not in (0, len(ref_images)):
        raise UsageError(f"{len(ref_scripts)} reference scripts for {len(ref_images)} references")
    if len(preceding) >= len(shot_scripts):
        raise UsageError("every storyboard needs at least one shot left to generate")
    z_ref = encode_references(ref_images, codec)
    z_pre = encode_shots(preceding, codec, repeat).values.astype(np.float32) if preceding else None
    return Conditions(
        shot_ids=_as_ids(shot_scripts),
        z_ref=None if z_ref is None else z_ref.values.astype(np.float32),
        ref_ids=_as_ids(ref_scripts) if ref_scripts else [[] for _ in ref_images],
        z_pre=z_pre,
    )


def sample(model: DiT, codec: PatchCodec, shot_scripts, cfg: SampleConfig, ref_images=None, ref_scripts=None,
           preceding_shots=None) -> SampleResult:
    cfg = cfg.validate()
    cond = build_conditions(codec, cfg.mode, shot_scripts, ref_images, ref_scripts, preceding_shots)
    start = model.calls
    z, norms = sample_latents(model, cond, cfg)
    images = [to_uint8(np.clip(x, 0, 1)) for x in decode(z, codec)]
    return SampleResult(
        latents=z, images=images,
        condition_images=[np.asarray(i) for i in list(ref_images or []) + list(preceding_shots or [])],
        step_norms=norms, calls=model.calls - start, config=cfg,
        scripts=[s if isinstance(s, str) else " ".join(map(str, s)) for s in shot_scripts],
    )


def contact_sheet(rows: list[list[np.ndarray]], gap: int = 2, fill=(255, 255, 255)) -> np.ndarray:
    """Grid of equally sized uint8 images, one row per list."""
    rows = [r for r in rows if r]
    h, w = rows[0][0].shape[:2]
    cols = max(len(r) for r in rows)
    sheet = np.empty((len(rows) * (h + gap) + gap, cols * (w + gap) + gap, 3), np.uint8)
    sheet[:] = fill
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = gap + i * (h + gap), gap + j * (w + gap)
            sheet[y:y + h, x:x + w] = img
    return sheet


def write_outputs(result: SampleResult, out_dir, png: bool = False) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(result.images):
        write_ppm(out / f"shot_{i}.ppm", img)
    sheet = contact_sheet([result.condition_images, result.images])
    write_ppm(out / "contact_sheet.ppm", sheet)
    if png:
        from PIL import Image

        Image.fromarray(sheet).save(out / "contact_sheet.png")
    write_json(out / "manifest.json", {
        "seed": result.config.seed,
        "config": asdict(result.config),
        "scripts": result.scripts,
        "model_calls": result.calls,
        "step_norms": result.step_norms,
        "shots": [f"shot_{i}.ppm" for i in range(len(result.images))],
    })
    return out

