"""Portable 64-bit PRNG used everywhere randomness is needed.

The generator is SplitMix64 (Steele/Lea/Vigna): state advances by the odd
constant 0x9E3779B97F4A7C15 and each output is the finalizer

    z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27; z *= 0x94D049BB133111EB
    z ^= z >> 31

applied to the new state, all modulo 2**64.  Any implementation of those
integer operations reproduces the stream bit-exactly; every derived float
is produced from the integers by fixed rules:

* unit floats:   (u64 >> 11) * 2**-53            in [0, 1)
* open floats:   ((u64 >> 11) + 1) * 2**-53      in (0, 1]
* gaussians:     Box-Muller on one open and one unit float, cosine
                 variate returned first, sine variate second

Independent substreams (e.g. one per pixel) are derived by seeding a new
stream with ``mix64(seed + key * 0x9E3779B97F4A7C15)``; evaluation order of
substreams never affects their contents.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U53 = 2.0 ** -53


def mix64(z: int) -> int:
    """SplitMix64 output finalizer on a 64-bit integer."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return (z ^ (z >> 31)) & _MASK


class SplitMix64:
    """Scalar SplitMix64 stream."""

    __slots__ = ("state", "_spare")

    def __init__(self, seed: int):
        self.state = seed & _MASK
        self._spare: float | None = None

    @classmethod
    def derive(cls, seed: int, key: int) -> "SplitMix64":
        """Independent substream for (seed, key)."""
        return cls(mix64((seed + key * GOLDEN) & _MASK))

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & _MASK
        return mix64(self.state)

    def next_unit(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * _U53

    def next_open(self) -> float:
        """Uniform double in (0, 1], safe as a log() argument."""
        return ((self.next_u64() >> 11) + 1) * _U53

    def next_uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_unit()

    def next_gaussian(self) -> float:
        """Standard normal via Box-Muller; variates are returned in pairs."""
        if self._spare is not None:
            g, self._spare = self._spare, None
            return g
        u1 = self.next_open()
        u2 = self.next_unit()
        rad = math.sqrt(-2.0 * math.log(u1))
        ang = 2.0 * math.pi * u2
        self._spare = rad * math.sin(ang)
        return rad * math.cos(ang)

    def next_poisson(self, lam: float) -> int:
        """Knuth's product method; intended for small rates."""
        if lam <= 0.0:
            return 0
        limit = math.exp(-lam)
        k = 0
        p = 1.0
        while True:
            p *= self.next_unit()
            if p <= limit:
                return k
            k += 1


# Vectorized counterparts operating on uint64 state arrays.  They implement
# exactly the scalar rules above, so a substream consumed through the array
# API matches the scalar class draw for draw.

def mix64_array(state: np.ndarray) -> np.ndarray:
    z = state.copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX2)
    z ^= z >> np.uint64(31)
    return z


def derive_states(seed: int, keys: np.ndarray) -> np.ndarray:
    """Initial states for one substream per key (uint64 array)."""
    keys = np.asarray(keys, dtype=np.uint64)
    return mix64_array(np.uint64(seed & _MASK) + keys * np.uint64(GOLDEN))


def next_u64_array(states: np.ndarray) -> np.ndarray:
    """Advance every stream in place and return one output per stream."""
    states += np.uint64(GOLDEN)
    return mix64_array(states)


def u64_to_unit(u: np.ndarray) -> np.ndarray:
    return (u >> np.uint64(11)).astype(np.float64) * _U53


def next_unit_array(states: np.ndarray) -> np.ndarray:
    return u64_to_unit(next_u64_array(states))
