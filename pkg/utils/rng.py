"""Counter-based random streams.

Every random draw in the laboratory comes from a Philox generator keyed by
the experiment seed plus a tuple of integers (stream tag, group, user, ...).
Outputs therefore do not depend on generation order or thread scheduling.
"""

import numpy as np

# Stream tags (first key after the seed)
STREAM_CHANNEL = 0
STREAM_SPLIT = 1
STREAM_INIT = 2
STREAM_SHUFFLE = 3
STREAM_TRAIN_BITS = 4
STREAM_VALID_BITS = 5
STREAM_EVAL_BITS = 6
STREAM_CORRUPT = 7
STREAM_SUBSET = 8


def keyed_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, *keys)``"""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
