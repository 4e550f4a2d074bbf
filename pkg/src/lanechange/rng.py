"""SplitMix64 generator.

Used by the synthetic generator so corpora are reproducible from the seed
alone, independent of numpy's generator versions.  Output ``i`` (1-based) of
a stream seeded with ``s`` is ``mix(s + i * GAMMA)`` mod 2**64, which lets
blocks of draws be produced with vectorized uint64 arithmetic.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK

    def u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            out = _mix(z)
        self.state = (self.state + n * GAMMA) & _MASK
        return out

    def next_u64(self) -> int:
        return int(self.u64(1)[0])

    def uniform(self, n: int | None = None):
        """Doubles in [0, 1) built from the top 53 bits."""
        u = (self.u64(1 if n is None else n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if n is None else u

    def normal(self, n: int | None = None):
        """Standard normals by Box-Muller, one (u1, u2) pair per draw."""
        m = 1 if n is None else n
        u = self.uniform(2 * m).reshape(m, 2)
        z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        return float(z[0]) if n is None else z

    def split(self) -> SplitMix64:
        """An independent child stream seeded from this one."""
        return SplitMix64(self.next_u64())
