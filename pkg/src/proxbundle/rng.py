"""Deterministic pseudo-random generator (splitmix64).

Every stochastic component of the package draws from an ``Rng`` so that any
run is reproducible from a single integer seed.  Substreams derived with
``child`` depend only on the root seed and the key, never on how many values
the parent has already produced.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U64_30 = np.uint64(30)
_U64_27 = np.uint64(27)
_U64_31 = np.uint64(31)
_U64_11 = np.uint64(11)
_TWO_NEG53 = 2.0 ** -53


def _mix(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on a uint64 array (wraps mod 2^64)."""
    z = (z ^ (z >> _U64_30)) * np.uint64(_MIX1)
    z = (z ^ (z >> _U64_27)) * np.uint64(_MIX2)
    return z ^ (z >> _U64_31)


def _mix_int(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def _fold_key(key) -> int:
    """FNV-1a over the key's string form, for stable substream derivation."""
    h = 0xCBF29CE484222325
    for b in str(key).encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK
    return h


class Rng:
    """Seeded splitmix64 stream producing float64 variates."""

    def __init__(self, seed: int):
        self._root = int(seed) & _MASK
        self._state = self._root

    def child(self, key) -> "Rng":
        """Independent substream determined by the root seed and ``key`` only."""
        return Rng(_mix_int(self._root ^ _fold_key(key)))

    def _raw(self, n: int) -> np.ndarray:
        # state is a Python int so scalar arithmetic never overflows; the
        # per-element counters are mixed vectorized in uint64.
        base = self._state
        self._state = (base + n * _GAMMA) & _MASK
        idx = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
        idx += np.uint64(base)
        return _mix(idx)

    def uniform(self, *shape: int) -> np.ndarray:
        """Uniform float64 in [0, 1)."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> _U64_11).astype(np.float64) * _TWO_NEG53
        return u.reshape(shape) if shape else float(u[0])

    def normal(self, *shape: int) -> np.ndarray:
        """Standard normal via Box-Muller."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        # shift into (0, 1) so log never sees zero
        u1 = ((self._raw(m) >> _U64_11).astype(np.float64) + 0.5) * _TWO_NEG53
        u2 = (self._raw(m) >> _U64_11).astype(np.float64) * _TWO_NEG53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape) if shape else float(z[0])

    def truncated_normal(self, *shape: int, std: float = 1.0, clip: float = 2.0) -> np.ndarray:
        """Normal(0, std) with rejection outside ±clip·std."""
        n = int(np.prod(shape)) if shape else 1
        out = np.empty(n)
        filled = 0
        while filled < n:
            cand = self.normal(2 * (n - filled))
            cand = cand[np.abs(cand) <= clip]
            take = min(cand.size, n - filled)
            out[filled : filled + take] = cand[:take]
            filled += take
        out *= std
        return out.reshape(shape) if shape else float(out[0])

    def integer(self, bound: int) -> int:
        """Uniform integer in [0, bound)."""
        return min(int(self.uniform() * bound), bound - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of arange(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integer(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
