"""Seeded counter-based random streams.

Every consumer asks for a generator by ``(seed, *stream_ids)``; streams are
Philox instances keyed through :class:`numpy.random.SeedSequence`, so the same
key always yields the same numbers and different keys are independent.
"""

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    key = [int(seed)] + [int(s) for s in stream]
    if any(k < 0 for k in key):
        raise ValueError(f"seeds and stream ids must be non-negative, got {key}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


# stream ids, so independent consumers never share a stream by accident
STREAM_INIT = 1
STREAM_DROPOUT = 2
STREAM_SHUFFLE = 3
STREAM_CROP = 4
STREAM_DISC_INIT = 5
