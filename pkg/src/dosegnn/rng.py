"""SplitMix64 pseudo-random generator.

Every random draw in the package (phantom geometry, parameter init, shuffles,
dataset splits) goes through this generator so that results depend only on
integer seeds and not on numpy's generator internals.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, *names: object) -> int:
    """Derive a named sub-seed, e.g. ``derive_seed(7, "init")``."""
    s = seed & _MASK
    for name in names:
        s = _mix((s + _GOLDEN + zlib.crc32(str(name).encode())) & _MASK)
    return s


class SplitMix64:
    def __init__(self, seed: int) -> None:
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        return _mix(self.state)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        # 53 high bits -> [0, 1)
        return low + (high - low) * ((self.next_u64() >> 11) * 2.0**-53)

    def uniform_array(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """``n`` draws, identical to ``n`` successive :meth:`uniform` calls."""
        if n == 0:
            return np.zeros(0)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GOLDEN) & _MASK
        unit = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * unit

    def randbelow(self, n: int) -> int:
        # rejection sampling, no modulo bias
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def shuffle(self, items: list) -> list:
        """Fisher-Yates shuffle returning a new list."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.randbelow(i + 1)
            out[i], out[j] = out[j], out[i]
        return out
