"""Seeded random streams.

Every stream is a Philox-4x64 counter-based generator keyed by a numpy
``SeedSequence(seed, spawn_key=keys)``. Replicate ``b`` of a procedure seeded
with ``s`` uses ``rng_for(s, tag, b)``, so results do not depend on the order
or the number of workers that evaluate the replicates.
"""

from __future__ import annotations

import numpy as np


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
