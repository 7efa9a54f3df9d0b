"""Run configuration: defaults, then an INI file, then ``section.key=value`` overrides."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .codec import PatchCodec, make_codec
from .data import SynthConfig
from .errors import ConfigError
from .model import ModelConfig
from .sampler import SampleConfig
from .train import TrainConfig


@dataclass(frozen=True)
class CodecConfig:
    p: int = 4
    d: int = 48
    seed: int = 0
    repeat: int = 4

    def validate(self) -> "CodecConfig":
        if self.p < 1 or self.d < 1 or self.repeat < 1:
            raise ConfigError(f"codec p, d and repeat must be positive, got {self}")
        return self

    def build(self) -> PatchCodec:
        return make_codec(p=self.p, d=self.d, seed=self.seed)


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": SynthConfig,
    "sample": SampleConfig,
    "codec": CodecConfig,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SynthConfig = field(default_factory=SynthConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)

    def validate(self) -> "RunConfig":
        for name in SECTIONS:
            getattr(self, name).validate()
        if self.data.size % self.codec.p:
            raise ConfigError(f"image size {self.data.size} is not a multiple of codec patch {self.codec.p}")
        return self

    def for_data(self, size: int | None = None) -> "RunConfig":
        """Tie the model's grid and latent width to the codec and image size."""
        size = size or self.data.size
        if size % self.codec.p:
            raise ConfigError(f"image size {size} is not a multiple of codec patch {self.codec.p}")
        return replace(self, model=replace(self.model, grid=size // self.codec.p, latent_dim=self.codec.d))

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            section = getattr(self, name)
            out[name] = {f.name: _plain(getattr(section, f.name)) for f in fields(section)}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls()
        for name, values in d.items():
            cfg = cfg.with_values(name, {k: v for k, v in values.items()}, typed=True)
        return cfg

    def with_values(self, section: str, values: dict, typed: bool = False) -> "RunConfig":
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]; choose from {sorted(SECTIONS)}")
        current = getattr(self, section)
        known = {f.name: f for f in fields(current)}
        updates = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {section}.{key}; known keys: {sorted(known)}")
            updates[key] = _coerce(raw, getattr(current, key), f"{section}.{key}") if not typed else _retuple(raw)
        return replace(self, **{section: replace(current, **updates)})


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _retuple(v):
    return tuple(v) if isinstance(v, list) else v


def _coerce(raw, default, name: str):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(x) for x in text.split(","))
        if default is None:
            return None if text.lower() in ("", "none") else text
        return text
    except ValueError as exc:
        raise ConfigError(f"cannot read {name}={raw!r} as {type(default).__name__}") from exc


def load_ini(path, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    cfg = base or RunConfig()
    for section in parser.sections():
        cfg = cfg.with_values(section, dict(parser[section]))
    return cfg


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``section.key=value`` strings."""
    for item in overrides or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        cfg = cfg.with_values(section, {name: value})
    return cfg


def to_ini(cfg: RunConfig) -> str:
    lines = []
    for name, values in cfg.to_dict().items():
        lines.append(f"[{name}]")
        for k, v in values.items():
            if isinstance(v, list):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{k} = {'none' if v is None else v}")
        lines.append("")
    return "\n".join(lines)

