"""Deterministic hashing and RNG primitives.

Everything downstream that needs randomness (weight init, k-means seeding,
corpus synthesis) or stable string hashing (tokenizer, feature-hash
embeddings, per-tensor stream seeds) goes through these two primitives so
that identical inputs give identical bytes on every run.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def fnv1a64(data: bytes | str) -> int:
    """64-bit FNV-1a hash."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & _MASK64
    return h


class SplitMix64:
    """Counter-based splitmix64 stream."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + SPLITMIX_GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def next_unit(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (2.0**-53)

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError("n must be positive")
        return min(int(self.next_unit() * n), n - 1)


def splitmix64_array(seed: int, count: int) -> np.ndarray:
    """The first `count` outputs of SplitMix64(seed), vectorized.

    splitmix64 is counter-based (state after n steps is seed + n*gamma), so
    the whole stream can be produced in one shot. Matches the scalar class
    element for element.
    """
    idx = np.arange(1, count + 1, dtype=np.uint64)
    z = np.uint64(seed & _MASK64) + idx * np.uint64(SPLITMIX_GAMMA)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def uniform_signed(seed: int, count: int, bound: float) -> np.ndarray:
    """`count` float32 draws uniform in [-bound, bound].

    Each 64-bit output contributes its top 24 bits; the 24-bit integer is
    mapped onto [-bound, bound] inclusive.
    """
    z = splitmix64_array(seed, count)
    u = (z >> np.uint64(40)).astype(np.float64) / float((1 << 24) - 1)
    return ((2.0 * u - 1.0) * bound).astype(np.float32)
