"""Counter-based random streams.

Every random quantity in a run is drawn from a Philox generator keyed by a
*seed label*: (master seed, purpose, replication, level, index, stream).
Two different labels give statistically independent streams, and the same
label always reproduces the same numbers, independent of evaluation order or
worker count.
"""
from __future__ import annotations

import numpy as np

# purposes
ESTIMATION = 0
REFERENCE = 1
PILOT = 2
VALIDATION = 3

# streams within one sample draw
PARTITION = 11
HEIGHTS = 12
NOISE = 13

NO_LEVEL = -1


def seed_label(master: int, purpose: int, replication: int, level: int,
               index: int, stream: int) -> tuple[int, ...]:
    return (int(master), int(purpose), int(replication), int(level) + 1,
            int(index), int(stream))


def stream(label: tuple[int, ...]) -> np.random.Generator:
    """Return a fresh Philox generator for ``label``."""
    master, *rest = label
    if master < 0 or any(r < 0 for r in rest):
        raise ValueError(f"seed label entries must be non-negative, got {label}")
    ss = np.random.SeedSequence(master, spawn_key=tuple(rest))
    return np.random.Generator(np.random.Philox(ss))
