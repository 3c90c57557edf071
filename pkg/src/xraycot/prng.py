"""Deterministic splitmix64 random streams.

Every stochastic choice in the package (synthetic images, frozen weights,
projection matrices, training init) draws from these streams, so a single
global seed plus purpose strings reproduces a whole run bit for bit.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, *labels: str) -> int:
    """Derive a sub-seed from (seed, labels), mixing each label byte-wise.

    Purpose strings keep independent streams independent: two different
    label tuples give unrelated sequences even for the same base seed.
    """
    h = _mix((seed + _GOLDEN) & _MASK)
    for label in labels:
        for b in label.encode("utf-8"):
            h = _mix((h ^ (b + 1)) + _GOLDEN)
        h = _mix(h ^ 0xFF)  # separator so ("ab","c") != ("a","bc")
    return h


class SplitMix64:
    """Counter-style splitmix64 generator with vectorized bulk draws."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK
        return _mix(self._state)

    def next_below(self, n: int) -> int:
        """Integer in [0, n) by modulo; fine for the tiny n used here."""
        return self.next_u64() % n

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * 2.0**-53
        return lo + (hi - lo) * u

    def _bulk(self, n: int) -> np.ndarray:
        # splitmix64 is counter-based: output i is mix(state + i*golden),
        # so a bulk draw is a vectorized map over a counter range.
        idx = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self._state) + idx * np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        self._state = (self._state + n * _GOLDEN) & _MASK
        return z

    def uniform_array(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = (self._bulk(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (lo + (hi - lo) * u).reshape(shape)

    def normal_array(self, shape, sigma: float = 1.0) -> np.ndarray:
        """Zero-mean gaussians via Box-Muller on paired uniform draws."""
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        # +1 shifts into (0, 1] so the log never sees zero
        u1 = ((self._bulk(m) >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * 2.0**-53
        u2 = (self._bulk(m) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (sigma * z).reshape(shape)
