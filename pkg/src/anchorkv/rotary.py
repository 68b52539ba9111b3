"""Rotary position embedding on interleaved coordinate pairs.

Pair ``t`` of a ``d_k``-dimensional head vector, ``(x[2t], x[2t+1])`` for
``t = 0 .. d_k/2 - 1``, is rotated by ``position * base**(-2t/d_k)``.
"""

from __future__ import annotations

import numpy as np

from .autograd import rotate_pairs
from .errors import ConfigError


def inverse_frequencies(d_k: int, base: float) -> np.ndarray:
    if d_k % 2:
        raise ConfigError(f"rotary embedding needs an even head dimension, got {d_k}")
    t = np.arange(d_k // 2, dtype=np.float64)
    return base ** (-2.0 * t / d_k)


def rope_tables(positions, d_k: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape ``positions.shape + (d_k // 2,)``."""
    angles = np.asarray(positions, dtype=np.float64)[..., None] * inverse_frequencies(d_k, base)
    return np.cos(angles), np.sin(angles)


def apply_rope(x, position, base: float = 10000.0) -> np.ndarray:
    """Rotate one head vector (or a stack of them sharing ``position``)."""
    x = np.asarray(x, dtype=np.float64)
    cos, sin = rope_tables(position, x.shape[-1], base)
    return rotate_pairs(x, cos, sin)
