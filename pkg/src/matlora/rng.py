"""Portable seeded random number generation.

PCG32 (PCG-XSH-RR 64/32, O'Neill's reference constants) with Box-Muller
Gaussian sampling layered on top. Everything is plain 64-bit integer
arithmetic plus deterministic float64 math, so any language can reproduce a
stream bit-exactly from (seed, stream). README.md documents the exact update
and output formulas.

Stream constants: distinct subsystems draw from distinct PCG32 streams of the
same user seed so that, e.g., changing the model architecture never shifts
the dataset noise.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1
_MULT = 6364136223846793005

# Stream ids per subsystem (see README).
STREAM_DATA = 1
STREAM_BACKBONE = 2
STREAM_ADAPTER = 3
STREAM_CORE = 4
STREAM_HARNESS = 5
STREAM_SHUFFLE = 6


class Pcg32:
    """PCG-XSH-RR 64/32: 64-bit LCG state, 32-bit rotated-xorshift output."""

    def __init__(self, seed: int, stream: int = 0):
        self.inc = ((stream << 1) | 1) & _MASK64
        self.state = 0
        self.next_uint32()
        self.state = (self.state + (seed & _MASK64)) & _MASK64
        self.next_uint32()
        self._spare: float | None = None

    def next_uint32(self) -> int:
        old = self.state
        self.state = (old * _MULT + self.inc) & _MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def uniform(self) -> float:
        """Uniform in [0, 1): next_uint32 * 2**-32."""
        return self.next_uint32() * 2.0**-32

    def gauss_pair(self) -> tuple[float, float]:
        """One Box-Muller draw; consumes exactly two uint32 values.

        u1 is shifted into (0, 1] so log(u1) is finite.
        """
        u1 = (self.next_uint32() + 1) * 2.0**-32
        u2 = self.next_uint32() * 2.0**-32
        r = math.sqrt(-2.0 * math.log(u1))
        phi = 2.0 * math.pi * u2
        return r * math.cos(phi), r * math.sin(phi)

    def gauss(self) -> float:
        """Standard normal; caches and returns the Box-Muller spare."""
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        z0, z1 = self.gauss_pair()
        self._spare = z1
        return z0


def normal_matrix(rng: Pcg32, rows: int, cols: int, std: float = 1.0):
    """Row-major matrix of iid N(0, std^2) draws from `rng.gauss()`."""
    import numpy as np

    out = np.empty((rows, cols), dtype=np.float64)
    flat = out.reshape(-1)
    for i in range(flat.size):
        flat[i] = rng.gauss() * std
    return out
