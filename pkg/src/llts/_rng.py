"""Deterministic random-stream splitting via numpy's counter-based Philox.

One master seed plus an integer stream id yields an independent Generator.
Streams never overlap (the id occupies the top counter word, leaving 2^192
draws per stream) and the mapping is pure: same (seed, stream) -> same
numbers on every platform and run.
"""

from __future__ import annotations

import numpy as np

# fixed stream ids per consumer so adding a consumer never shifts the others
STREAM_SYNTH_SCENE = 1
STREAM_DEGRADE = 2
STREAM_MODEL_INIT = 3
STREAM_TRAIN_ORDER = 4
STREAM_EVAL = 5


def stream(seed: int, stream_id: int, substream: int = 0) -> np.random.Generator:
    """Independent generator for (seed, stream_id, substream)."""
    if seed < 0 or stream_id < 0 or substream < 0:
        raise ValueError(f"seed/stream ids must be non-negative, got {(seed, stream_id, substream)}")
    bits = np.random.Philox(key=seed, counter=[0, 0, substream, stream_id])
    return np.random.Generator(bits)
