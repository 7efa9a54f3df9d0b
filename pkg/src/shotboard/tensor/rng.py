"""Seeded random streams.

Bits come from numpy's PCG64 generator; normals are produced from its
uniform doubles with the Box–Muller transform so the mapping from seed to
values is fixed by this module rather than by numpy's sampler choices.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def box_muller(rng: np.random.Generator, n: int) -> np.ndarray:
    """Return ``n`` standard normal float64 draws."""
    pairs = (n + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1], keeps log finite
    u2 = rng.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n]


def normal(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    shape = tuple(int(d) for d in shape)
    n = int(np.prod(shape)) if shape else 1
    return box_muller(rng, n).reshape(shape).astype(dtype)


def get_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
