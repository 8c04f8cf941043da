"""Counter-based SplitMix64 generator.

Output ``i`` of a stream with key ``k`` is ``mix(k + (i + 1) * 0x9E3779B97F4A7C15)``
where ``mix`` is the SplitMix64 finalizer. The key is ``mix(seed)``. All arithmetic
is unsigned 64-bit with wraparound, so the integer stream is identical on every
platform. Uniforms take the top 53 bits; normals use Box-Muller on consecutive
uniform pairs (cosine branch first, then sine). Sign draws unpack 64 signs
from each output.
"""

from __future__ import annotations

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1
_TWO_NEG53 = 2.0**-53


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _mix_int(value: int) -> int:
    return int(_mix(np.array([value & _MASK], dtype=np.uint64))[0])


class Rng:
    """Reproducible random stream. Not thread-safe; spawn one per worker."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self._key = np.uint64(_mix_int(self.seed))
        self.counter = 0

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def spawn(self, *labels) -> "Rng":
        """Independent child stream keyed by this seed and ``labels``."""
        h = hashlib.blake2b(repr((self.seed, labels)).encode(), digest_size=8)
        return Rng(int.from_bytes(h.digest(), "little"))

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(self._key + idx * _GOLDEN)

    def uniform(self, size=()) -> np.ndarray:
        """Uniform doubles on [0, 1)."""
        n = int(np.prod(size, dtype=np.int64))
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * _TWO_NEG53
        return u.reshape(size)

    def normal(self, size=()) -> np.ndarray:
        n = int(np.prod(size, dtype=np.int64))
        m = (n + 1) // 2
        b = self.bits(2 * m) >> np.uint64(11)
        u1 = (b[0::2].astype(np.float64) + 1.0) * _TWO_NEG53  # (0, 1], log-safe
        u2 = b[1::2].astype(np.float64) * _TWO_NEG53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(size)

    def signs(self, size=()) -> np.ndarray:
        """Rademacher +-1 draws, 64 per 64-bit output (least significant bit first)."""
        n = int(np.prod(size, dtype=np.int64))
        words = self.bits((n + 63) // 64)
        bits = np.unpackbits(words.astype("<u8").view(np.uint8), bitorder="little")[:n]
        return (2.0 * bits.astype(np.float64) - 1.0).reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")
