"""Deterministic random-stream splitting.

Every command takes one integer seed. Sub-streams are derived from
``(seed, tag, ...)`` where string tags are mapped through CRC32 and integer
tags are used as-is, then fed to :class:`numpy.random.SeedSequence` as the
spawn key. Equal inputs always give the same stream, on any platform.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError(f"integer tags must be non-negative, got {tag}")
        return int(tag)
    return zlib.crc32(str(tag).encode("utf-8"))


def seed_sequence(seed: int, *tags) -> np.random.SeedSequence:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(t) for t in tags))


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Return a fresh PCG64 generator for ``(seed, *tags)``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *tags)))


def derive_seed(seed: int, *tags) -> int:
    """A 32-bit integer seed derived from ``(seed, *tags)``."""
    return int(seed_sequence(seed, *tags).generate_state(1, dtype=np.uint32)[0])
