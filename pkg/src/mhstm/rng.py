"""Seeded random streams.

Every stream is a Philox generator keyed by ``(seed, *purpose)`` through
``SeedSequence`` spawn keys, so streams used by different components or
parallel runs never overlap and never depend on execution order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode())


def stream(seed: int, *purpose) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(_key(p) for p in purpose))
    return np.random.Generator(np.random.Philox(ss))
