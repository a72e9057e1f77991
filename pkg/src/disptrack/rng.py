"""Deterministic seed derivation shared by every stochastic operation.

All particle-based operations draw from a generator derived from a key tuple
(run seed, step, salt, component). Deriving rather than sharing one stream
makes results independent of execution order, so per-component work can be
parallelised without changing any output bit.
"""

from __future__ import annotations

import numpy as np

# Salts keep the streams of different operation kinds disjoint.
SALT_PARTICLE = 0
SALT_SPLIT = 1
SALT_OBSERVATIONS = 2
SALT_TRUTH = 3
SALT_CALIBRATION = 4


def derive_rng(*keys: int) -> np.random.Generator:
    """Generator for a deterministic key tuple of nonnegative integers."""
    return np.random.default_rng(np.random.SeedSequence(list(keys)))


def as_rng(seed) -> np.random.Generator:
    """Accept an int seed, a SeedSequence, or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def run_seeds(base_seed: int, n_runs: int) -> list[int]:
    """Independent per-run seeds derived from one base seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(base_seed).spawn(n_runs)]
