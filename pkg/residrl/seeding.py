"""
Splittable, counter-based randomness.

Every command owns one integer root seed. Child streams are derived with
SeedSequence spawning (or explicit integer keys) and drive Philox generators,
so no component touches global random state.
"""

from typing import Sequence

import numpy as np


def seed_sequence(seed, *keys: int) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        if not keys:
            return seed
        entropy = seed.entropy
        keys = tuple(seed.spawn_key) + tuple(keys)
        return np.random.SeedSequence(entropy, spawn_key=keys)
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))


def make_rng(seed, *keys: int) -> np.random.Generator:
    """Philox generator for the stream addressed by (seed, *keys)."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *keys)))


def derive_seed(seed, *keys: int) -> int:
    """Stable 63-bit integer seed for a child stream (e.g. one episode)."""
    state = seed_sequence(seed, *keys).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


def episode_seeds(seed, n: int, stream: int = 0) -> Sequence[int]:
    return [derive_seed(seed, stream, i) for i in range(n)]
