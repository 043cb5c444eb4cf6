"""Seeded uniform streams.

Every simulation run draws from its own PCG64 stream, keyed by a
``SeedSequence(entropy=base_seed, spawn_key=key)``. Keys used in the package:

* ``(0,)`` a standalone ``simulate`` run
* ``(1, r, replication)`` stationary sweep runs
* ``(2, r, replication)`` Lyapunov drift runs
* ``(3, r, seed)`` scaling-limit comparison runs
* ``(4, r, seed)`` fluid-limit comparison runs

Uniforms are drawn in blocks and handed out one at a time so that the
event loop does not pay a numpy call per draw.
"""

from __future__ import annotations

import numpy as np

BLOCK = 8192


class UniformStream:
    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        ss = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1), spawn_key=tuple(int(k) for k in key))
        self._gen = np.random.Generator(np.random.PCG64(ss))
        self.buf: list[float] = []
        self.pos = 0

    def refill(self) -> list[float]:
        self.buf = self._gen.random(BLOCK).tolist()
        self.pos = 0
        return self.buf

    def next(self) -> float:
        if self.pos == len(self.buf):
            self.refill()
        u = self.buf[self.pos]
        self.pos += 1
        return u

    def generator(self) -> np.random.Generator:
        """The underlying generator, for drawing initial perturbations."""
        return self._gen
