"""Seeded random streams."""

import numpy as np


class Rng:
    """A seeded PCG64 stream.

    Identical seeds give bit-identical sample streams. ``derive`` splits off
    an independent child stream keyed by integers, so e.g. every training
    episode can own a generator without sharing state with its neighbours.
    """

    def __init__(self, seed, *keys):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.keys)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def derive(self, *keys):
        return Rng(self.seed, *self.keys, *keys)

    def normal(self, shape=()):
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, shape=()):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high_inclusive):
        return int(self._gen.integers(low, high_inclusive, endpoint=True))

    def choice(self, n, size):
        """``size`` distinct indices from ``range(n)``, in sampled order."""
        return self._gen.choice(n, size=size, replace=False)

    def permutation(self, n):
        return self._gen.permutation(n)

    def get_state(self):
        return {"seed": self.seed, "keys": list(self.keys), "bit_generator": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state):
        rng = cls(state["seed"], *state["keys"])
        rng._gen.bit_generator.state = state["bit_generator"]
        return rng
