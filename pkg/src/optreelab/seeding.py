"""Seed derivation. Every random choice in the package flows from explicit integer seeds."""

from __future__ import annotations

import os

import numpy as np

ENV_SEED = "OPTREE_SEED"


def default_seed(fallback: int = 0) -> int:
    raw = os.environ.get(ENV_SEED)
    return int(raw) if raw not in (None, "") else fallback


def derive_seed(*parts: int) -> int:
    """Stable 63-bit child seed from a tuple of nonnegative-or-negative integers."""
    entropy = [int(p) % 2**64 for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0] >> np.uint64(1))
