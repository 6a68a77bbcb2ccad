"""Named random streams derived from the master seed."""

import hashlib

import numpy as np


def stage_seed(master: int, stage: str) -> int:
    """Seed of a named child stream, stable across runs and platforms."""
    key = int.from_bytes(hashlib.sha256(stage.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([master, key]).generate_state(1, dtype=np.uint64)[0])


def stage_rng(master: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(stage_seed(master, stage))
