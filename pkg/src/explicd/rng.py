"""Deterministic random streams shared by every seeded component.

All randomness in the package (text embeddings, weight init, synthetic
rendering, batch shuffling) flows through FNV-1a seeding plus a splitmix64
stream, so results are bit-reproducible across platforms and independent of
numpy's global RNG state.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes | str) -> int:
    """64-bit FNV-1a hash of bytes (strings are UTF-8 encoded)."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


class SplitMix64:
    """splitmix64 generator; the whole sequence is a pure function of the seed."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def next_unit(self) -> float:
        """Uniform in [0, 1) from the top 53 bits of the next draw."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def next_symmetric(self) -> float:
        """Uniform in [-1, 1) from the top 53 bits of the next draw."""
        return 2.0 * self.next_unit() - 1.0

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection, so the draw is unbiased."""
        if n <= 0:
            raise ValueError("next_below: n must be positive")
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def symmetric(self, n: int) -> np.ndarray:
        """n uniforms in [-1, 1) as a float64 array."""
        return np.array([self.next_symmetric() for _ in range(n)], dtype=np.float64)

    def normals(self, n: int, std: float = 1.0) -> np.ndarray:
        """n N(0, std^2) draws via Box-Muller on consecutive uniform pairs."""
        out = np.empty(n, dtype=np.float64)
        for i in range(0, n, 2):
            u1 = self.next_unit()
            u2 = self.next_unit()
            r = math.sqrt(-2.0 * math.log(1.0 - u1))  # 1-u1 in (0,1], log never -inf
            theta = 2.0 * math.pi * u2
            out[i] = r * math.cos(theta)
            if i + 1 < n:
                out[i + 1] = r * math.sin(theta)
        return out * std

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.next_below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def stream(*parts: object) -> SplitMix64:
    """Stream seeded from the FNV-1a hash of the '/'-joined parts.

    Distinct purposes (init vs shuffling vs rendering) get distinct label
    parts, which keeps their draws independent of one another.
    """
    return SplitMix64(fnv1a64("/".join(str(p) for p in parts)))
