"""Seeded random streams.

Every stream is a numpy ``Generator`` over the counter-based Philox-4x64
bit generator; normal variates come from numpy's ziggurat sampler. Both
are fixed algorithms, so a seed reproduces the same draws on any platform.
Independent substreams are derived with ``SeedSequence.spawn``.
"""

from __future__ import annotations

import numpy as np


class RngStream:
    def __init__(self, seed=0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(seed)
        self.generator = np.random.Generator(np.random.Philox(self._seq))

    @classmethod
    def from_key(cls, *key: int) -> "RngStream":
        """Stream for a tuple of non-negative ints, e.g. ``(seed, fold)``."""
        return cls(np.random.SeedSequence(list(key)))

    def spawn(self, n: int) -> list["RngStream"]:
        return [RngStream(s) for s in self._seq.spawn(n)]

    def standard_normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def standard_normal(rng: RngStream, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.standard_normal(n)
