"""Counter-based noise streams keyed by (seed, path index, substream tag).

Every path owns independent Philox streams, one per purpose, so ensembles
are bit-reproducible for any block size, thread count, or evaluation order.
"""

from __future__ import annotations

import numpy as np

TAG_RADIAL = 0  # Gaussian driving increments
TAG_RAYS = 1  # per-excursion ray or plan draws
TAG_BRIDGE = 2  # within-step bridge auxiliaries
TAG_FRESH = 3  # fresh-leg increments in the coupled construction


def stream(seed: int, path_index: int, tag: int) -> np.random.Generator:
    """Independent generator for one (path, purpose) substream."""
    if seed < 0:
        raise ValueError("seed must be a nonnegative integer")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(path_index), int(tag)))
    return np.random.Generator(np.random.Philox(ss))
