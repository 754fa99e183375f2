from __future__ import annotations

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator keyed on ``(seed, *stream)``.

    Philox is counter based and its double stream is bit-identical across
    platforms, so every seeded artifact in the package is reproducible.
    Distinct ``stream`` tags give independent substreams for one seed.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


# Substream tags, one per consumer.
STREAM_DATA = 0
STREAM_SPLIT = 1
STREAM_INIT_F = 2
STREAM_INIT_G = 3
STREAM_SHUFFLE = 4
STREAM_INIT_ATTN = 5
