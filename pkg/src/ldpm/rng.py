"""Counter-based random streams derived from a single experiment seed.

Every stream is a Philox generator keyed by ``SeedSequence(seed, spawn_key)``,
so any (seed, key) pair can be regenerated independently of the order in
which streams are requested.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream key parts must be >= 0, got {part}")
        return int(part)
    if isinstance(part, float):
        part = repr(part)
    return zlib.crc32(str(part).encode("utf-8"))


def derive_rng(seed: int, *key) -> np.random.Generator:
    """Generator for the stream named by ``key`` under ``seed``."""
    spawn_key = tuple(_key_part(p) for p in key)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=spawn_key)))


def user_rng(seed: int, user: int) -> np.random.Generator:
    """Per-user stream, for randomizing one client at a time."""
    return derive_rng(seed, "user", user)
