"""Named random streams derived from a single run seed.

Every consumer of randomness asks for ``stream(seed, purpose, *counters)``.
The stream is ``SeedSequence(seed, spawn_key=(PURPOSES[purpose], *counters))``,
so e.g. the geometry of sample 17, attempt 3 is
``spawn_key=(0, 17, 3)``. Streams never share state, which keeps sample
generation reproducible regardless of worker count or ordering.
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "geometry": 0,
    "shuffle": 1,
    "init": 2,
    "split": 3,
    "search": 4,
    "misc": 5,
}


def stream(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    if purpose not in PURPOSES:
        raise ValueError(f"unknown random stream purpose {purpose!r}")
    if seed < 0 or any(c < 0 for c in counters):
        raise ValueError("seeds and counters must be non-negative")
    seq = np.random.SeedSequence(int(seed), spawn_key=(PURPOSES[purpose], *map(int, counters)))
    return np.random.default_rng(seq)


def derive_seed(seed: int, purpose: str, *counters: int) -> int:
    """A 63-bit integer seed for a sub-task, stable across platforms."""
    seq = np.random.SeedSequence(int(seed), spawn_key=(PURPOSES[purpose], *map(int, counters)))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
