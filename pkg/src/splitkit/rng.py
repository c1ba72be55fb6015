"""Deterministic, seedable random number generation.

Every stochastic choice in the library (weight init, data synthesis, patch
masking, batch order) flows through :class:`Rng`, a counter-based splitmix-style
generator with 64-bit state.  Identical seeds therefore reproduce identical
runs bit-for-bit, independent of call-site interleaving across platforms.
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer: xor-shift / multiply avalanche (wrapping on purpose).
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *tags: int) -> int:
    """Fold integer tags into ``seed`` to get an independent child seed."""
    z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        for t in tags:
            z = _mix((z + _GOLDEN) ^ np.uint64(t & 0xFFFFFFFFFFFFFFFF))
    return int(z)


class Rng:
    """Splitmix-style generator producing uint64 words, uniforms and normals."""

    def __init__(self, seed: int):
        self._state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)

    def next_u64(self, n: int = 1) -> np.ndarray:
        """The next ``n`` raw 64-bit words as a uint64 array."""
        with np.errstate(over="ignore"):
            steps = (np.arange(1, n + 1, dtype=np.uint64)) * _GOLDEN
            words = _mix(self._state + steps)
            self._state = (self._state + np.uint64(n) * _GOLDEN) & _MASK
        return words

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """float32 uniforms in [low, high)."""
        n = int(np.prod(shape)) if shape else 1
        words = self.next_u64(n)
        u = (words >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        out = (low + (high - low) * u).astype(np.float32)
        return out.reshape(shape) if shape else out[0]

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """float32 normals via Box-Muller on paired uniforms."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        words = self.next_u64(2 * m)
        # (0, 1] for the log argument, [0, 1) for the angle.
        u1 = ((words[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * (1.0 / (1 << 53))
        u2 = (words[m:] >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        out = (mean + std * z).astype(np.float32)
        return out.reshape(shape) if shape else out[0]

    def randint(self, low: int, high: int, shape=()) -> np.ndarray | int:
        """Integers in [low, high). Modulo bias is negligible for toy ranges."""
        if high <= low:
            raise ValueError("randint requires high > low")
        n = int(np.prod(shape)) if shape else 1
        words = self.next_u64(n)
        vals = (words % np.uint64(high - low)).astype(np.int64) + low
        return vals.reshape(shape) if shape else int(vals[0])

    def shuffled(self, n: int) -> np.ndarray:
        """A permutation of range(n) (Fisher-Yates driven by this stream)."""
        perm = np.arange(n, dtype=np.int64)
        if n > 1:
            draws = self.next_u64(n - 1)
            for i in range(n - 1, 0, -1):
                j = int(draws[n - 1 - i] % np.uint64(i + 1))
                perm[i], perm[j] = perm[j], perm[i]
        return perm

    def child(self, *tags: int) -> "Rng":
        """Independent child stream; deterministic in (current state, tags)."""
        return Rng(derive_seed(int(self._state), *tags))
