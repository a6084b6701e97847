"""Seeded random streams for initialization, augmentation, and mixing.

A stream is identified by (seed, key) where `key` is a tuple of integers
mapped onto a PCG64 spawn key.  `child(*key)` derives an independent
substream from the same seed, so per-sample draws depend only on
(seed, epoch, sample index) and stay reproducible no matter how work is
batched or ordered.
"""
from __future__ import annotations

import numpy as np

__all__ = ["Rng"]


class Rng:
    """Deterministic random stream with derivable substreams.

    Symmetric Beta draws use the two-gamma-ratio construction, so values
    are reproducible per seed but not comparable with other Beta samplers.
    """

    __slots__ = ("seed", "key", "_gen")

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *key: int) -> "Rng":
        """Derive the independent substream at `self.key + key`."""
        return Rng(self.seed, self.key + key)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def beta(self, alpha: float, size=None):
        """Draw from the symmetric Beta(alpha, alpha) distribution."""
        if alpha <= 0:
            raise ValueError(f"alpha must be positive, got {alpha}")
        a = self._gen.standard_gamma(alpha, size=size)
        b = self._gen.standard_gamma(alpha, size=size)
        tot = a + b
        if size is None:
            # Both gammas can underflow to zero for tiny alpha; split evenly.
            return float(a / tot) if tot > 0 else 0.5
        out = np.full(np.shape(a), 0.5)
        np.divide(a, tot, out=out, where=tot > 0)
        return out

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"
