"""Deterministic RNG stream derivation.

Every stochastic component draws from a generator derived from a root seed
plus a structured key path, so runs replay exactly regardless of execution
order or parallelism.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"seed keys must be non-negative, got {key}")
        return int(key)
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"unsupported seed key type: {type(key).__name__}")


def _flatten(keys):
    for key in keys:
        if isinstance(key, (tuple, list)):
            yield from _flatten(key)
        else:
            yield key


def seed_sequence(*keys) -> np.random.SeedSequence:
    """Build a SeedSequence from a root seed and a path of sub-keys.

    Integer keys are used as-is; string keys are hashed so that named
    streams ("env", "policy", ...) never collide with episode indices.
    Tuples and lists flatten, so a composite seed like (root, task) can be
    handed around as one value.
    """
    flat = list(_flatten(keys))
    if not flat:
        raise ValueError("at least one seed key is required")
    return np.random.SeedSequence([_key_to_int(k) for k in flat])


def rng_from(*keys) -> np.random.Generator:
    """Derive an independent Generator for the given key path."""
    return np.random.default_rng(seed_sequence(*keys))
