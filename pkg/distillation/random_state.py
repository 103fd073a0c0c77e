"""Deterministic rng streams forked from a master seed.

Every independent unit of work (a probe, a sweep cell, a training run) asks
for its own generator keyed by what it is, never by when it runs, so results
do not depend on scheduling.
"""
import hashlib
from typing import Union

import numpy as np

Key = Union[int, str]


def key_to_int(key: Key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f'rng keys must be non-negative, got {key}')
        return int(key)
    digest = hashlib.sha256(str(key).encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little')


def fork_seed(master_seed: int, *keys: Key) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(key_to_int(k) for k in keys))


def fork_rng(master_seed: int, *keys: Key) -> np.random.Generator:
    """Generator for the stream (master_seed, *keys)"""
    return np.random.default_rng(fork_seed(master_seed, *keys))
