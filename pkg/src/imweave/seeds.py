"""Deterministic random streams.

All randomness flows through numpy's PCG64 generator seeded from
SeedSequence entropy vectors, which hash identically on every platform.

Stream layout under a run seed ``s`` (entropy vectors):

==================  =============================================
``[s, 0, b]``       group-size draws for batch ``b``
``[s, 0, b, g]``    member selection for group ``g`` of batch ``b``
``[s, 1, u]``       group-size draw for matched-union ``u``
``[s, 1, u, 0]``    member selection within matched-union ``u``
``[s, 2, r]``       bootstrap resampling round ``r``
==================  =============================================
"""

from __future__ import annotations

import numpy as np

STREAM_BATCH = 0
STREAM_UNION = 1
STREAM_BOOTSTRAP = 2


def child_seed(root_seed: int, *path: int) -> int:
    """Collapse an entropy vector to a single reproducible 64-bit seed."""
    seq = np.random.SeedSequence([int(root_seed), *(int(p) for p in path)])
    return int(seq.generate_state(1, np.uint64)[0])


def rng_from(root_seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(child_seed(root_seed, *path))
