"""Seed plumbing: one user-visible seed fans out into named sub-streams.

Every source of randomness in the package derives its generator through
``stream_rng`` so that changing, say, the augmentation draw order can never
perturb dataset generation or parameter init.
"""

from __future__ import annotations

import zlib

import numpy as np

# Canonical stream names used across the package.
DATA = "data"
INIT = "init"
AUGMENT = "augment"
SPLIT = "split"
SHUFFLE = "shuffle"


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream_seed(seed: int, name: str, *extra: int) -> np.random.SeedSequence:
    """Derive the seed material for sub-stream `name` of the master `seed`."""
    parts = [int(seed) & 0xFFFFFFFF, _key(name)]
    for e in extra:
        parts.append(int(e) & 0xFFFFFFFFFFFFFFFF)
    return np.random.SeedSequence(parts)


def stream_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for sub-stream `name`; extra ints select sub-sub-streams."""
    return np.random.default_rng(stream_seed(seed, name, *extra))


def string_key(s: str) -> int:
    """Stable non-negative integer key for a string (e.g. a study id)."""
    return zlib.crc32(s.encode("utf-8"))
