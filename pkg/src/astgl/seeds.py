"""Named random sub-streams derived from one top-level seed."""

from __future__ import annotations

import numpy as np

STREAMS = {"grid": 0, "generation": 1, "init": 2, "shuffle": 3, "hpo": 4}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *extra)``."""
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng([int(seed), STREAMS[name], *(int(e) for e in extra)])


def sub_seed(seed: int, name: str) -> int:
    """A 32-bit integer seed for APIs that take plain integers."""
    return int(stream(seed, name).integers(0, 2**31 - 1))
