"""Deterministic seed derivation.

Every random stream in the package is keyed by a 64-bit integer seed.  Child
seeds are derived by hashing ``(parent, *keys)`` through numpy's
``SeedSequence``, so replicate ``b`` of a test always sees the same stream no
matter which worker runs it or in what order.
"""

import numpy as np

from .errors import InvalidConfigError

UINT64_MAX = 2**64 - 1

# sub-stream tags used inside a single network/replicate seed
STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_PERMUTE = 2


def check_seed(seed):
    seed = int(seed)
    if not 0 <= seed <= UINT64_MAX:
        raise InvalidConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def derive_seed(seed, *keys):
    """Hash ``seed`` and integer ``keys`` into a new 64-bit seed."""
    ss = np.random.SeedSequence([check_seed(seed), *[int(k) for k in keys]])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def replicate_seeds(master_seed, tag, count):
    """Seeds for replicates ``1..count``; raises if any two collide."""
    seeds = [derive_seed(master_seed, tag, b) for b in range(1, count + 1)]
    if len(set(seeds)) != len(seeds):  # pragma: no cover - 2**-64 territory
        raise RuntimeError("replicate seed collision; choose another master seed")
    return seeds


def rng(seed, stream):
    """Generator for one named sub-stream of ``seed``."""
    return np.random.default_rng([check_seed(seed), stream])
