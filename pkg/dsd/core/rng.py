"""Keyed random streams.

Every stochastic operation takes an explicit ``numpy.random.Generator``.
Parallel sections derive one stream per work item from ``(seed, *keys)``
so results never depend on how work is scheduled across workers.
"""

import zlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"Stream keys must be non-negative, got {key}")
    return int(key)


def derive_rng(seed: int, *keys: Key) -> np.random.Generator:
    """Independent PCG64 stream for ``seed`` and a path of integer or string keys."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(sequence))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed from ``rng`` for handing to a keyed derivation."""
    return int(rng.integers(0, 2**63 - 1))
