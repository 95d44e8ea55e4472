"""Deterministic seed derivation.

Every source of randomness in the package derives from a stable hash of
string-able parts, so results are identical across runs, processes and
worker counts.
"""
from __future__ import annotations

import hashlib

import numpy as np

_SEP = b"\x1f"


def derive_seed(*parts) -> int:
    """Map an arbitrary tuple of parts to a stable 64-bit seed."""
    payload = _SEP.join(str(p).encode("utf-8") for p in parts)
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "big")


def rng_for(*parts) -> np.random.Generator:
    """A fresh numpy Generator keyed by the given parts."""
    return np.random.default_rng(derive_seed(*parts))


def uniform_for(*parts) -> float:
    """A single deterministic uniform in [0, 1) keyed by the given parts."""
    return derive_seed(*parts) / 2.0**64
