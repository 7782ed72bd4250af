"""Seeded random number generation shared by every component.

All randomness flows through :class:`Rng`, a thin wrapper over numpy's
PCG64 bit generator (64-bit state, 128-bit LCG with XSL-RR output).
Normal variates are produced with the Box-Muller transform on top of the
generator's uniform stream so the sampling rule is explicit and fixed.
"""

from __future__ import annotations

import numpy as np


class Rng:
    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, size) -> np.ndarray:
        """Standard normal samples via Box-Muller."""
        n = int(np.prod(size)) if np.ndim(size) else int(size)
        pairs = (n + 1) // 2
        # 1 - U keeps the log argument in (0, 1]
        u1 = 1.0 - self._gen.random(pairs)
        u2 = self._gen.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:n].reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def spawn(self, tag: int) -> "Rng":
        """Independent child stream keyed by (seed, tag)."""
        return Rng((self.seed * 1_000_003 + int(tag)) % (2**63))
