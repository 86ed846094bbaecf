"""Counter-based random streams.

Every random draw in the package comes from a Philox4x64-10 generator whose
key is derived from ``(seed, *indices)`` with :class:`numpy.random.SeedSequence`.
A stream therefore depends only on *what* it is used for (step, particle,
sweep, ...) and never on which worker process evaluates it, which is what
makes runs bit-identical for any worker count.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "numpy Philox4x64-10, keys from SeedSequence(seed, spawn_key=indices)"

# Stream purposes. Values are part of the reproducibility contract: changing
# one changes every result that depends on it.
INIT = 1
OUTER_RESAMPLE = 2
INNER_STEP = 3
PMMH = 4
IS_PARTICLE = 5
GENERATE = 6
MAP = 7
TOY = 8


def stream(seed: int, *indices: int) -> np.random.Generator:
    """Return the generator for ``(seed, *indices)``."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(i) for i in indices))
    return np.random.Generator(np.random.Philox(ss))
