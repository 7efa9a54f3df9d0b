"""Model configuration."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

from ..data.scripts import MAX_SCRIPT_LEN, VOCAB
from ..errors import ConfigError

STRATEGIES = ("prepend", "append", "phase", "negative")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 96
    n_heads: int = 4
    n_blocks: int = 4
    latent_dim: int = 48
    grid: int = 12  # latent tokens per side (image size / patch size)
    vocab_size: int = len(VOCAB)
    max_script_len: int = MAX_SCRIPT_LEN
    rope_theta: float = 10000.0
    strategy: str = "prepend"
    phase_delta: float = math.pi / 4
    neg_delta: int = 8
    mlp_ratio: int = 2
    time_freqs: int = 8
    init_seed: int = 0

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> "ModelConfig":
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not a multiple of n_heads={self.n_heads}")
        if self.head_dim % 6:
            raise ConfigError(f"head_dim={self.head_dim} must be divisible by 6 for the 3-axis rotary split")
        if self.n_blocks < 1:
            raise ConfigError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown positional strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.latent_dim < 1 or self.grid < 1 or self.vocab_size < 1 or self.max_script_len < 1:
            raise ConfigError("latent_dim, grid, vocab_size and max_script_len must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()
