# modules/seeding.py
import numpy as np

SEED_MASK = (1 << 64) - 1


def derive_seed(seed: int, *keys: int) -> int:
    """Hash (seed, *keys) into a new 64-bit seed."""
    ss = np.random.SeedSequence(entropy=int(seed) & SEED_MASK, spawn_key=tuple(int(k) for k in keys))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & SEED_MASK, spawn_key=tuple(int(k) for k in keys))
    return np.random.default_rng(ss)


def sklearn_state(seed: int) -> int:
    # sklearn wants a 32-bit random_state
    return derive_seed(seed) & 0xFFFFFFFF


# stream keys, so the same seed never feeds two unrelated consumers
PROPENSITY_STREAM = 1
PROGNOSTIC_STREAM = 2
OUTCOME_STREAM = 3
