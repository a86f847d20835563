"""Deterministic PRNG: xoshiro256++ seeded via splitmix64.

Implemented by algorithm rather than delegated to a library so that
partitions, model initialisation and batch orders are reproducible
bit-for-bit across platforms and implementations.
"""
from __future__ import annotations

import math

MASK64 = (1 << 64) - 1

_SM_GAMMA = 0x9E3779B97F4A7C15
_SM_MUL1 = 0xBF58476D1CE4E5B9
_SM_MUL2 = 0x94D049BB133111EB


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    state = (state + _SM_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * _SM_MUL1) & MASK64
    z = ((z ^ (z >> 27)) * _SM_MUL2) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, tag: int) -> int:
    """Mix a stream tag into a root seed (seed XOR tag through the mixer)."""
    _, out = splitmix64((seed ^ tag) & MASK64)
    return out


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Rng:
    """xoshiro256++ stream; state expanded from the seed with splitmix64."""

    def __init__(self, seed: int):
        state = seed & MASK64
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        self._s = s
        self._gauss_cache: float | None = None

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[0] + s[3]) & MASK64, 23) + s[0]) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def next_double(self) -> float:
        """Uniform in [0, 1) with 53-bit resolution."""
        return (self.next_u64() >> 11) * 2.0**-53

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n), modulo bias removed by rejection."""
        if n <= 0:
            raise ValueError("next_below requires n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        """Standard Box-Muller; the sine mate is cached for the next call."""
        if self._gauss_cache is not None:
            z = self._gauss_cache
            self._gauss_cache = None
        else:
            u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53  # (0, 1], log-safe
            u2 = (self.next_u64() >> 11) * 2.0**-53
            r = math.sqrt(-2.0 * math.log(u1))
            theta = 2.0 * math.pi * u2
            z = r * math.cos(theta)
            self._gauss_cache = r * math.sin(theta)
        return mean + std * z

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_double()

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]

    def choose(self, items: list, k: int) -> list:
        """k distinct elements via partial Fisher-Yates; order is random."""
        if k > len(items):
            raise ValueError("cannot choose %d from %d items" % (k, len(items)))
        pool = list(items)
        n = len(pool)
        for i in range(k):
            j = i + self.next_below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]
