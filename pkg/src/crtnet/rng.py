"""Deterministic random number generation.

Every stochastic choice in the package (weight init, dropout masks, scene
sampling, epoch shuffling) flows through :class:`Rng`, a thin wrapper around
numpy's PCG64 bit generator.  Independent sub-streams are derived by hashing
the parent seed together with a label, so any piece of a run (one sample, one
epoch) can be regenerated in isolation without replaying the whole stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["Rng", "derive_seed"]

_MASK64 = (1 << 64) - 1


def derive_seed(*parts) -> int:
    """Hash ints/strings into a 64-bit seed via SHA-256 (stable across runs)."""
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little")


class Rng:
    """Seeded PCG64 stream: same seed + same call sequence -> same values."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, *parts) -> "Rng":
        """Child stream keyed by (this seed, *parts); independent of call order."""
        return Rng(derive_seed(self.seed, *parts))

    def random(self, shape=None) -> np.ndarray | float:
        """Uniform float64 in [0, 1)."""
        return self._gen.random(shape)

    def uniform(self, low: float, high: float, shape=None):
        return self._gen.uniform(low, high, shape)

    def normal(self, scale: float = 1.0, shape=None):
        return self._gen.normal(0.0, scale, shape)

    def integers(self, low: int, high: int) -> int:
        """One integer drawn uniformly from [low, high)."""
        return int(self._gen.integers(low, high))

    def choice(self, seq):
        """Uniform pick from a sequence (index drawn from this stream)."""
        if len(seq) == 0:
            raise ValueError("choice from an empty sequence")
        return seq[self.integers(0, len(seq))]

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed})"
