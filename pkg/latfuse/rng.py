"""
Seeded random streams.

Every random draw in latfuse goes through PCG64 seeded by a SeedSequence of
``(seed, stream)``. Raw 64-bit outputs are turned into floats with a fixed
formula, so results do not depend on numpy's Generator method internals.
"""

import numpy as np

_DOUBLE_SCALE = 2.0 ** -53

# Stream ids. Appending is fine, renumbering changes every pinned output.
STRUCTURE = 0
DETAIL = 1
NOISE = 2
WEIGHTS = 3
BIAS = 4
JITTER = 5
BASE_INPUT = 6
REFINED_INPUT = 7
PROBE = 8


def _bit_generator(seed: int, stream: int) -> np.random.PCG64:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))


def uniform01(seed: int, stream: int, count: int) -> np.ndarray:
    """`count` float64 values in [0, 1) from the top 53 bits of each draw"""
    raw = _bit_generator(seed, stream).random_raw(count)
    return (np.asarray(raw, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * _DOUBLE_SCALE


def uniform(seed: int, stream: int, shape, low: float, high: float) -> np.ndarray:
    count = int(np.prod(shape, dtype=np.int64))
    u = uniform01(seed, stream, count).reshape(shape)
    return low + (high - low) * u