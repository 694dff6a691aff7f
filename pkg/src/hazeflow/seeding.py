"""Deterministic seed derivation.

Every stochastic operation takes an explicit 64-bit seed; child streams are
derived through numpy's splittable SeedSequence so that (root seed, key path)
always yields the same generator, independent of call order.
"""

from __future__ import annotations

import numpy as np


def derive_seed(root: int, *keys: int) -> int:
    """Derive a stable 64-bit child seed from a root seed and integer keys."""
    ss = np.random.SeedSequence(entropy=root, spawn_key=tuple(int(k) for k in keys))
    state = ss.generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def child_rng(root: int, *keys: int) -> np.random.Generator:
    """Generator seeded by derive_seed(root, *keys)."""
    return np.random.default_rng(derive_seed(root, *keys))
