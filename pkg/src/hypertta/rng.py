"""Seeded, replayable random streams.

Every random draw in the project comes from SplitMix64 run in counter mode:
the ``i``-th 64-bit output of a stream with key ``k`` is

    mix64(k + (i + 1) * 0x9E3779B97F4A7C15)

where ``mix64`` is the SplitMix64 finalizer

    z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27; z *= 0x94D049BB133111EB
    z ^= z >> 31

(all arithmetic mod 2**64). A stream key is derived from ``(seed, tag, index)``
by ``mix64(mix64(mix64(seed) ^ fnv1a64(tag)) + index)``, so each
(operator, band) pair owns an independent stream that can be regenerated
without replaying any other stream. Because outputs are a pure function of the
counter, draws vectorize over numpy ``uint64`` arrays.

Derived variates:

* uniform in [0, 1): ``(z >> 11) * 2**-53``
* uniform integer in [0, n): ``floor(uniform * n)``
* standard normal: Box-Muller cosine branch on two consecutive uniforms,
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_MUL1 = 0xBF58476D1CE4E5B9
MIX_MUL2 = 0x94D049BB133111EB
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

_INV_2_53 = 1.0 / (1 << 53)


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX_MUL1) & MASK64
    z = ((z ^ (z >> 27)) * MIX_MUL2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(MIX_MUL1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(MIX_MUL2)
    return z ^ (z >> np.uint64(31))


def fnv1a64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


def stream_key(seed: int, tag: str, index: int = 0) -> int:
    return mix64(mix64(mix64(seed & MASK64) ^ fnv1a64(tag)) + (index & MASK64))


class Stream:
    """One independent random stream; draws advance an internal counter."""

    def __init__(self, seed: int, tag: str, index: int = 0):
        self.seed = int(seed)
        self.tag = tag
        self.index = int(index)
        self.key = stream_key(self.seed, tag, self.index)
        self.counter = 0

    def bits(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("negative draw count")
        start = self.counter
        self.counter += n
        steps = np.arange(start + 1, start + n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + steps * np.uint64(GOLDEN_GAMMA)
            return _mix64_array(z)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        if low == 0.0 and high == 1.0:
            return u
        return low + (high - low) * u

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """Integers uniform on [low, high)."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(n)
        return low + np.minimum(np.floor(u * (high - low)).astype(np.int64), high - low - 1)

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        u = self.uniform(2 * n)
        u1, u2 = u[0::2], u[1::2]
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        if mean == 0.0 and std == 1.0:
            return z
        return mean + std * z

    def choice(self, population: int, k: int) -> np.ndarray:
        """``k`` distinct values from ``range(population)`` in draw order (partial Fisher-Yates)."""
        if not 0 <= k <= population:
            raise ValueError(f"cannot choose {k} of {population} without replacement")
        pool = np.arange(population, dtype=np.int64)
        u = self.uniform(k)
        for i in range(k):
            j = i + min(int(u[i] * (population - i)), population - i - 1)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()

    def permutation(self, n: int) -> np.ndarray:
        return self.choice(n, n)


def stream(seed: int, tag: str, index: int = 0) -> Stream:
    return Stream(seed, tag, index)
