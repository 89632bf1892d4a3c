"""Seeded random streams with simulation-cost accounting.

Every stochastic routine in the package draws from a CountingStream, so a
run's cost (Gaussian increments consumed, observation-density evaluations)
is tallied as a side effect of simulation and reproducibility reduces to
"same stream construction, same results".
"""
from __future__ import annotations

import numpy as np


class CountingStream:
    """Wrap a numpy Generator and count what passes through it.

    Counters:
      gaussians      number of scalar N(0,1) variates consumed
      density_evals  number of observation-density evaluations charged
                     by the particle filters (via add_density_evals)
    """

    def __init__(self, seed):
        # seed may be an int, a SeedSequence, or None (OS entropy)
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(seed)
        self.gen = np.random.Generator(np.random.PCG64(self._seq))
        self.gaussians = 0
        self.density_evals = 0

    @property
    def seed_sequence(self) -> np.random.SeedSequence:
        return self._seq

    def child(self, *key: int) -> "CountingStream":
        """Derive an independent stream keyed by integers.

        Children depend only on (root entropy, key), never on how many
        draws the parent has made, so replicate streams are stable under
        any execution order.
        """
        base = self._seq.spawn_key + tuple(int(k) for k in key)
        return CountingStream(
            np.random.SeedSequence(entropy=self._seq.entropy, spawn_key=base)
        )

    def standard_normal(self, size=None) -> np.ndarray:
        if size is None:
            n = 1
        elif isinstance(size, int):
            n = size
        else:
            n = 1
            for s in size:
                n *= int(s)
        self.gaussians += n
        return self.gen.standard_normal(size)

    def normal_increments(self, n_steps: int, shape, dt: float) -> np.ndarray:
        """Draw Brownian increments of variance dt, shape (n_steps, *shape)."""
        out = self.standard_normal((n_steps,) + tuple(shape))
        out *= np.sqrt(dt)
        return out

    def uniform(self, size=None) -> np.ndarray:
        return self.gen.random(size)

    def add_density_evals(self, n: int) -> None:
        self.density_evals += int(n)

    def counters(self) -> dict:
        return {"gaussians": self.gaussians, "density_evals": self.density_evals}
