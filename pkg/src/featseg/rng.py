"""Counter-based SplitMix64 random numbers.

Every weight in the toy encoder is a pure function of (seed, label, index),
so any draw can be reproduced without replaying a stream.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """``count`` raw uint64 outputs of SplitMix64 starting at ``offset``."""
    idx = np.arange(offset + 1, offset + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * _GOLDEN)


def derive_seed(seed: int, label: str) -> int:
    """A stable sub-seed for a named parameter group."""
    h = np.uint64(0xCBF29CE484222325)
    with np.errstate(over="ignore"):
        for byte in label.encode("utf-8"):
            h = (h ^ np.uint64(byte)) * np.uint64(0x100000001B3)
        h = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ h)
    return int(h)


def uniform(seed: int, shape, low: float, high: float) -> np.ndarray:
    """Uniform float32 draws in [low, high) from the counter-based stream."""
    count = int(np.prod(shape)) if shape else 1
    bits = splitmix64(seed, count)
    u01 = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return (low + (high - low) * u01).astype(np.float32).reshape(shape)


def unit_rows(seed: int, rows: int, dim: int) -> np.ndarray:
    """Seeded random unit vectors, one per row."""
    m = uniform(seed, (rows, dim), -1.0, 1.0).astype(np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return (m / norms).astype(np.float32)
