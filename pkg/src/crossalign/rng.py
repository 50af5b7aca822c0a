"""SplitMix64 streams with named substreams.

State advances by the golden-ratio increment 0x9E3779B97F4A7C15 and each
output is the finalizer of Steele, Lea and Flood:

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

Blocks are produced with wrapping uint64 arithmetic, so the stream is
identical whether values are drawn one at a time or in bulk.  Substream seeds
mix the parent seed with the 64-bit FNV-1a hash of the substream name.
"""
from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MUL1 = 0xBF58476D1CE4E5B9
MUL2 = 0x94D049BB133111EB
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * MUL1) & MASK64
    z = ((z ^ (z >> 27)) * MUL2) & MASK64
    return z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MUL1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MUL2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        self.seed = seed & MASK64
        self.state = self.seed

    def substream(self, name: str) -> SplitMix64:
        return SplitMix64(mix64(self.seed ^ fnv1a64(name)))

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
        self.state = (self.state + n * GAMMA) & MASK64
        return _mix_array(z)

    def uniform(self, n: int | None = None):
        """Doubles in [0, 1) from the top 53 bits."""
        if n is None:
            return (self.next_u64() >> 11) * 2.0 ** -53
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def randbelow(self, n: int) -> int:
        return min(int(self.uniform() * n), n - 1)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        """Box-Muller (cosine branch only), two uniforms per draw."""
        count = int(np.prod(shape))
        u = self.uniform(2 * count)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
        return (std * z).reshape(shape)
