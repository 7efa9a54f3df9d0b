"""Procedural storyboard samples and their on-disk layout."""

from __future__ import annotations

import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ConfigError
from ..tensor.rng import make_rng
from .palette import ACCESSORIES, PATTERNS, QUADRANTS, ROLE_COLORS, SCALES, SCENE_COLORS, SHAPES
from .render import REF_VARIANTS, RoleSpec, render_reference, render_shot
from .scripts import MAX_ROLES, parse_reference_script, parse_shot_script, reference_script, shot_script


@dataclass(frozen=True)
class SynthConfig:
    k_min: int = 1
    k_max: int = 2
    s_min: int = 2
    s_max: int = 4
    size: int = 48
    # two-role confusion is only measurable when roles differ in color
    distinct_colors: bool = False
    # probability that a role is placed in a shot beyond the mandatory placement
    presence: float = 0.75
    ref_variant: str | None = None

    def validate(self) -> "SynthConfig":
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigError(f"need 1 <= k_min <= k_max, got {self.k_min}..{self.k_max}")
        if self.k_max > MAX_ROLES:
            raise ConfigError(f"at most {MAX_ROLES} roles fit in the quadrant layout, got k_max={self.k_max}")
        if not 1 <= self.s_min <= self.s_max:
            raise ConfigError(f"need 1 <= s_min <= s_max, got {self.s_min}..{self.s_max}")
        if self.size < 8 or self.size % 2:
            raise ConfigError(f"image size must be even and >= 8, got {self.size}")
        if not 0.0 <= self.presence <= 1.0:
            raise ConfigError(f"presence must be in [0, 1], got {self.presence}")
        if self.ref_variant is not None and self.ref_variant not in REF_VARIANTS:
            raise ConfigError(f"unknown reference variant {self.ref_variant!r}")
        return self


@dataclass(frozen=True)
class ShotSpec:
    scene: tuple[str, str]
    placements: dict  # role index -> (quadrant, scale)


@dataclass
class StoryboardSample:
    roles: list[RoleSpec]
    ref_variants: list[str]
    shots: list[ShotSpec]
    ref_images: list[np.ndarray]
    ref_masks: list[np.ndarray]
    shot_images: list[np.ndarray]
    shot_masks: list[dict]  # per shot: role index -> bool mask
    sample_id: str = "sample"
    seed: int | None = None
    ref_scripts: list[str] = field(default_factory=list)
    shot_scripts: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.ref_scripts:
            self.ref_scripts = [reference_script(k, r) for k, r in enumerate(self.roles)]
        if not self.shot_scripts:
            self.shot_scripts = [shot_script(s.scene, s.placements) for s in self.shots]

    @property
    def K(self) -> int:
        return len(self.roles)

    @property
    def S(self) -> int:
        return len(self.shots)

    @property
    def scene(self) -> tuple[str, str]:
        return self.shots[0].scene

    def correspondences(self) -> dict[int, dict]:
        """Role k -> its reference index and the shots it appears in."""
        return {
            k: {"ref": k, "shots": [s for s, shot in enumerate(self.shots) if k in shot.placements]}
            for k in range(self.K)
        }

    def meta(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "seed": self.seed,
            "roles": [r.to_dict() for r in self.roles],
            "ref_variants": list(self.ref_variants),
            "scene": list(self.scene),
            "shots": [
                {"placements": {str(k): list(v) for k, v in sorted(s.placements.items())}}
                for s in self.shots
            ],
            "ref_scripts": list(self.ref_scripts),
            "shot_scripts": list(self.shot_scripts),
            "correspondences": {str(k): v for k, v in self.correspondences().items()},
        }


def gen_role(rng, exclude=(), distinct_colors: bool = False) -> RoleSpec:
    """Draw a role that differs from every role in ``exclude``."""
    used_colors = {r.color for r in exclude}
    while True:
        role = RoleSpec(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=list(ROLE_COLORS)[rng.integers(len(ROLE_COLORS))],
            accessory=ACCESSORIES[rng.integers(len(ACCESSORIES))],
        )
        if role in exclude or (distinct_colors and role.color in used_colors):
            continue
        return role


def _gen_placements(rng, K: int, S: int, presence: float) -> list[dict]:
    present = rng.random((S, K)) < presence
    # every shot shows someone and every role shows up somewhere
    for s in range(S):
        if not present[s].any():
            present[s, rng.integers(K)] = True
    for k in range(K):
        if not present[:, k].any():
            present[rng.integers(S), k] = True
    shots = []
    for s in range(S):
        quads = rng.permutation(len(QUADRANTS))
        shots.append({
            k: (QUADRANTS[quads[k]], SCALES[rng.integers(len(SCALES))])
            for k in range(K) if present[s, k]
        })
    return shots


def gen_sample(rng, config: SynthConfig | None = None, sample_id: str = "sample", seed=None) -> StoryboardSample:
    cfg = (config or SynthConfig()).validate()
    K = int(rng.integers(cfg.k_min, cfg.k_max + 1))
    S = int(rng.integers(cfg.s_min, cfg.s_max + 1))
    roles: list[RoleSpec] = []
    for _ in range(K):
        roles.append(gen_role(rng, roles, cfg.distinct_colors))
    variants = [cfg.ref_variant or REF_VARIANTS[rng.integers(len(REF_VARIANTS))] for _ in range(K)]
    scene = (list(SCENE_COLORS)[rng.integers(len(SCENE_COLORS))], PATTERNS[rng.integers(len(PATTERNS))])
    placements = _gen_placements(rng, K, S, cfg.presence)
    return build_sample(roles, variants, scene, placements, cfg.size, sample_id, seed)


def build_sample(roles, variants, scene, placements, size=48, sample_id="sample", seed=None) -> StoryboardSample:
    """Render a sample from explicit specs."""
    refs = [render_reference(r, v, size) for r, v in zip(roles, variants)]
    shots = [ShotSpec(tuple(scene), dict(p)) for p in placements]
    rendered = [render_shot(s.scene, s.placements, roles, size) for s in shots]
    return StoryboardSample(
        roles=list(roles),
        ref_variants=list(variants),
        shots=shots,
        ref_images=[img for img, _ in refs],
        ref_masks=[m for _, m in refs],
        shot_images=[img for img, _ in rendered],
        shot_masks=[m for _, m in rendered],
        sample_id=sample_id,
        seed=seed,
    )


def sample_from_seed(seed: int, config: SynthConfig | None = None, sample_id: str = "sample") -> StoryboardSample:
    return gen_sample(make_rng(seed), config, sample_id, seed)


def sample_from_scripts(ref_scripts, shot_scripts, variants=None, size=48, sample_id="sample") -> StoryboardSample:
    """Inverse of script generation: rebuild a sample from its scripts alone."""
    parsed = sorted((parse_reference_script(s) for s in ref_scripts), key=lambda p: p[0])
    if [k for k, _ in parsed] != list(range(len(parsed))):
        raise ConfigError("reference scripts must name role1..roleK exactly once each")
    roles = [r for _, r in parsed]
    shots = [parse_shot_script(s) for s in shot_scripts]
    scenes = {sc for sc, _ in shots}
    if len(scenes) != 1:
        raise ConfigError(f"a storyboard has one scene, scripts name {sorted(scenes)}")
    if any(k >= len(roles) for _, p in shots for k in p):
        raise ConfigError("a shot script names a role without a reference script")
    variants = variants or ["centered-large"] * len(roles)
    return build_sample(roles, variants, shots[0][0], [p for _, p in shots], size, sample_id)


# -- disk layout ----------------------------------------------------------------

def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def ppm_bytes(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.dtype == bool:
        img = np.repeat((img.astype(np.uint8) * 255)[..., None], 3, axis=-1)
    elif img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(img, "RGB").save(buf, format="PPM")
    return buf.getvalue()


def write_ppm(path, image) -> None:
    _atomic_write(Path(path), ppm_bytes(image))


def read_ppm(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except OSError as exc:
        raise OSError(f"failed to read image {path}: {exc}") from exc


def write_json(path, obj) -> None:
    _atomic_write(Path(path), (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def save_sample(sample: StoryboardSample, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k in range(sample.K):
        write_ppm(d / f"ref_{k}.ppm", sample.ref_images[k])
        write_ppm(d / f"ref_{k}.mask.ppm", sample.ref_masks[k])
    for s in range(sample.S):
        write_ppm(d / f"shot_{s}.ppm", sample.shot_images[s])
        for k, m in sorted(sample.shot_masks[s].items()):
            write_ppm(d / f"shot_{s}.role_{k}.mask.ppm", m)
    write_json(d / "meta.json", sample.meta())
    return d


def load_sample(directory) -> StoryboardSample:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except OSError as exc:
        raise OSError(f"failed to read {d / 'meta.json'}: {exc}") from exc
    roles = [RoleSpec(**r) for r in meta["roles"]]
    shots = [
        ShotSpec(tuple(meta["scene"]), {int(k): tuple(v) for k, v in s["placements"].items()})
        for s in meta["shots"]
    ]
    return StoryboardSample(
        roles=roles,
        ref_variants=meta["ref_variants"],
        shots=shots,
        ref_images=[read_ppm(d / f"ref_{k}.ppm") for k in range(len(roles))],
        ref_masks=[read_ppm(d / f"ref_{k}.mask.ppm")[..., 0] > 127 for k in range(len(roles))],
        shot_images=[read_ppm(d / f"shot_{s}.ppm") for s in range(len(shots))],
        shot_masks=[
            {k: read_ppm(d / f"shot_{s}.role_{k}.mask.ppm")[..., 0] > 127 for k in sorted(shot.placements)}
            for s, shot in enumerate(shots)
        ],
        sample_id=meta["sample_id"],
        seed=meta["seed"],
        ref_scripts=meta["ref_scripts"],
        shot_scripts=meta["shot_scripts"],
    )


def sample_seeds(seed: int, n: int) -> list[int]:
    return [int(x) for x in make_rng(seed).integers(0, 2**31 - 1, size=n)]


def gen_dataset(seed: int, n: int, out_dir, config: SynthConfig | None = None) -> dict:
    """Write ``n`` samples under ``out_dir`` and return the manifest."""
    cfg = (config or SynthConfig()).validate()
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(sample_seeds(seed, n)):
        sid = f"sample_{i:04d}"
        sample = sample_from_seed(s, cfg, sid)
        save_sample(sample, out / sid)
        entries.append({"id": sid, "seed": s, "K": sample.K, "S": sample.S})
    manifest = {"seed": seed, "n": n, "config": asdict(cfg), "samples": entries}
    write_json(out / "manifest.json", manifest)
    return manifest


def load_dataset(root) -> list[StoryboardSample]:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise ConfigError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    if not manifest.get("samples"):
        raise ConfigError(f"dataset at {root} is empty")
    return [load_sample(root / e["id"]) for e in manifest["samples"]]


def dataset_config(root) -> SynthConfig:
    manifest = json.loads((Path(root) / "manifest.json").read_text())
    return SynthConfig(**manifest["config"])
