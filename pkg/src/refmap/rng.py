"""Counter-based random streams.

Every stochastic routine in the library derives its stream from an integer
seed plus small structural tags (object index, schedule step, chain id).
Philox is counter-based, so two streams with different keys are independent
and a given stream yields the same values no matter when or on which thread
it is consumed. Each keyed stream draws whole arrays in one call; nothing
depends on interleaving.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
# tag fields are packed into the second Philox key word
_FIELD_BITS = 20
_FIELD_MASK = (1 << _FIELD_BITS) - 1


def keyed_rng(seed: int, *tags: int) -> np.random.Generator:
    """Return a Generator keyed on (seed, tags...).

    Up to three non-negative tags, each below 2**20, are packed without
    collision; larger values are hashed into the same word (still
    deterministic, collisions merely theoretical).
    """
    if len(tags) > 3:
        raise ValueError("at most three stream tags are supported")
    word = 0
    for i, t in enumerate(tags):
        t = int(t)
        if t < 0:
            raise ValueError("stream tags must be non-negative")
        if t > _FIELD_MASK:
            t = (t * 0x9E3779B97F4A7C15) & _FIELD_MASK
        word |= t << (i * _FIELD_BITS)
    # distinguish "no tag" from "tag 0" by the populated-field count
    word |= (len(tags) + 1) << (3 * _FIELD_BITS)
    key = np.array([int(seed) & _MASK64, word & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
