"""Counter-based random streams.

Every draw is addressed by a key tuple (seed, stream, index) so that a given
sample or column is reproducible regardless of how many others are drawn or
which worker draws it.
"""

from __future__ import annotations

import numpy as np

STREAM_SYNTH = 1
STREAM_WLS_SAMPLE = 2
STREAM_DEMONS_SAMPLE = 3
STREAM_MODES = 4


def keyed_generator(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    """Philox generator keyed on ``(seed, stream, index)``."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, index])))


def standard_normal(seed: int, stream: int, index: int, shape) -> np.ndarray:
    return keyed_generator(seed, stream, index).standard_normal(shape)
