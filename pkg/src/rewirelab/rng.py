"""Deterministic RNG stream derivation.

Every stochastic component derives its generator from a base seed plus a
tuple of string/int tags, so runs are reproducible regardless of call
order elsewhere in the program.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(base_seed: int, *tags) -> int:
    """Map (base_seed, tags...) to a stable 64-bit seed via sha256."""
    text = repr((int(base_seed),) + tuple(tags)).encode("utf-8")
    digest = hashlib.sha256(text).digest()
    return int.from_bytes(digest[:8], "little")


def child_rng(base_seed: int, *tags) -> np.random.Generator:
    """A fresh Generator for the stream named by the tags."""
    return np.random.default_rng(derive_seed(base_seed, *tags))
