"""Seed derivation shared by every module.

Sub-streams are keyed by hashing the parent seed together with a purpose tag,
so adding a new consumer never shifts the numbers seen by an existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *tags: object) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for tag in tags:
        h.update(b"\x1f")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest(), "little")


def make_rng(seed: int, *tags: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *tags))
