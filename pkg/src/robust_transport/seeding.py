"""Seed derivation for reproducible parallel trials.

Child seeds come from SplitMix64 applied to the master seed mixed with a
sequence of integer keys (trial index, grid cell, role...). The mapping is
pure, so any trial can be regenerated on its own from ``(master, keys)``.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    z = (x + _GAMMA) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master: int, *keys: int) -> int:
    """Fold ``keys`` into ``master`` one SplitMix64 round at a time."""
    s = splitmix64(int(master) & _MASK)
    for k in keys:
        s = splitmix64(s ^ (int(k) & _MASK))
    return s


def rng_for(master: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
