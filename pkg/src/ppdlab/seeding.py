"""Counter-based RNG streams.

Every random draw in the package comes from ``stream(seed, *keys)``: a fresh
generator whose state depends only on the master seed and the key path.
String keys are folded in through CRC32 so the mapping is stable across
processes and Python versions.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    k = int(k)
    if k < 0:
        raise ValueError(f"stream keys must be non-negative, got {k}")
    return k


def stream(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([_key(seed), *map(_key, keys)]))


def derive_seed(seed: int, *keys) -> int:
    """A 63-bit child seed, for APIs that want an integer rather than a generator."""
    return int(stream(seed, *keys).integers(0, 2**63 - 1))
