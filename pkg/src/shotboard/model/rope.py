"""Three-axis rotary position embedding.

The head dimension is split into three equal groups for the (t, y, x) axes.
Within a group of size ``g`` the pair ``(2i, 2i+1)`` rotates by
``pos · θ^(-2i/g)``.  An optional per-token phase is added to every angle.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from ..tensor import Tensor, custom_op


def rope_angles(positions, head_dim: int, theta: float = 10000.0, phase=None) -> np.ndarray:
    """``N×3`` positions -> ``N×(head_dim/2)`` rotation angles."""
    if head_dim % 6:
        raise ConfigError(f"head_dim={head_dim} must be divisible by 6 for the 3-axis rotary split")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    g = head_dim // 3
    freqs = theta ** (-np.arange(0, g, 2, dtype=np.float64) / g)  # g/2 frequencies per axis
    ang = np.concatenate([pos[:, a:a + 1] * freqs[None, :] for a in range(3)], axis=1)
    if phase is not None:
        ang = ang + np.asarray(phase, dtype=np.float64).reshape(-1, 1)
    return ang


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def rope_apply(x: Tensor, angles: np.ndarray) -> Tensor:
    """Rotate ``x`` (``...×N×head_dim``) by per-token ``angles`` (``N×head_dim/2``)."""
    cos = np.cos(angles).astype(x.dtype)
    sin = np.sin(angles).astype(x.dtype)
    # the inverse rotation carries the gradient back
    return custom_op("rope", _rotate(x.data, cos, sin), (x,), lambda g: (_rotate(g, cos, -sin),))
