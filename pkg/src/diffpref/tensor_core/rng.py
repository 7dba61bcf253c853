"""Seeded randomness.

Every stream is numpy's PCG64 bit generator keyed by a ``SeedSequence``
built from ``(seed, *key)``.  PCG64 output is specified bit-for-bit and is
identical on every platform numpy supports.
"""

from __future__ import annotations

import numpy as np


class Rng:
    """A deterministic random stream with cheap derivation of child streams."""

    def __init__(self, seed: int, key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.key)))

    def child(self, *key: int) -> "Rng":
        """Independent stream for ``(seed, *self.key, *key)``; does not consume from self."""
        return Rng(self.seed, self.key + tuple(key))

    def copy(self) -> "Rng":
        """A new stream positioned exactly where this one is."""
        other = Rng(self.seed, self.key)
        other._gen.bit_generator.state = self._gen.bit_generator.state
        return other

    def normal(self, size=None, loc=0.0, scale=1.0) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def state(self) -> dict:
        return self._gen.bit_generator.state

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"
