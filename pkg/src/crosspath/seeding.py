"""Named random streams derived from one master seed.

``stream(seed, "init")``, ``stream(seed, "augment")`` and so on are
independent generators, so any one component can be replayed without
running the others.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    key = [int(seed), zlib.crc32(name.encode("utf-8")), *map(int, extra)]
    return np.random.default_rng(np.random.SeedSequence(key))
