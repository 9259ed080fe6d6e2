"""Deterministic seed derivation shared by generators, embeddings, and blinding."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from any mix of strings/ints (process-salt free)."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def rng_for(*parts) -> np.random.Generator:
    """PCG64 generator keyed by the hashed parts; same parts, same stream."""
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
