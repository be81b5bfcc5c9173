"""Deterministic, splittable random streams on top of numpy's Philox generator."""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    """Counter-based RNG addressed by ``(seed, stream)``.

    The stream id occupies the top word of Philox's 256-bit counter, so two
    streams under one seed walk disjoint counter ranges.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        bitgen = np.random.Philox(key=self.seed, counter=[0, 0, 0, self.stream])
        self._gen = np.random.Generator(bitgen)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def split(self, k: int) -> "Rng":
        """Child stream ``k`` of this stream; children of distinct parents or indices differ."""
        return Rng(self.seed, (self.stream * 0x100000001B3 + int(k) + 1) & _MASK64)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)
