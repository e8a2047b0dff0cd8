"""Derived random streams.

Every consumer of randomness gets its own PCG64 generator, keyed by a path of
names/ints under the run seed through ``numpy.random.SeedSequence`` spawn keys.
A stream never depends on how many draws another stream made, so runs stay
reproducible when cells execute in parallel or components are added.
"""

import numpy as np

_NAMES = {
    "env": 1,
    "robot": 2,
    "q_init": 3,
    "comm_init": 4,
    "explore": 5,
    "replay": 6,
    "eval": 7,
    "episode": 8,
}
MASK64 = (1 << 64) - 1


def seed_sequence(seed, *path):
    key = tuple(_NAMES[p] if isinstance(p, str) else int(p) for p in path)
    return np.random.SeedSequence(int(seed) & MASK64, spawn_key=key)


def generator(seed, *path):
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *path)))


def derived_int(seed, *path):
    """A 63-bit integer seed for components that take plain ints."""
    return int(seed_sequence(seed, *path).generate_state(1, np.uint64)[0] >> np.uint64(1))
