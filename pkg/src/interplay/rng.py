"""SplitMix64 random source.

The generator is the standard SplitMix64 (Steele, Lea, Flood 2014)::

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

all arithmetic modulo 2**64. Floats are ``(z >> 11) * 2**-53`` so every
port that reproduces the integer stream reproduces the float stream. Because
the state advances by a constant, the n-th output only depends on
``seed + n * GOLDEN`` and blocks of draws are computed vectorized.
"""

from __future__ import annotations

import math

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def splitmix64_scalar(state: int) -> tuple[int, int]:
    """One SplitMix64 step on Python ints; returns (new_state, output)."""
    state = (state + GOLDEN) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class SplitMix64:
    """Seedable 64-bit generator with vectorized block draws."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GOLDEN)
            out = _mix(states)
        self.state = (self.state + n * GOLDEN) & _MASK
        return out

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * u

    def integers(self, n: int, low: int, high: int) -> np.ndarray:
        """Integers in [low, high) by flooring a scaled uniform."""
        u = self.uniform(n)
        return np.minimum(low + np.floor(u * (high - low)).astype(np.int64), high - 1)

    def normal(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller on pairs of uniforms."""
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1], keeps log finite
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u[m:]
        return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]

    def derive(self, tag: int) -> "SplitMix64":
        """Independent child stream keyed by ``tag`` (does not advance self)."""
        _, out = splitmix64_scalar((self.state ^ (tag * GOLDEN)) & _MASK)
        return SplitMix64(out)
