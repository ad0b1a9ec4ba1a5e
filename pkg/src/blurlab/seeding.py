"""Deterministic seed derivation and random generator construction.

All randomness in the package flows through ``numpy.random.Generator``
objects built from explicit 64-bit seeds.  Child seeds are derived by
hashing a label path with SHA-256, so results do not depend on any
language/hash-table iteration order and are reproducible across
platforms and processes.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "generator"]


def derive_seed(*parts: object) -> int:
    """Derive a 64-bit seed from a path of labels.

    ``derive_seed(1234, "pretrain", 3)`` hashes the string
    ``"1234/pretrain/3"`` with SHA-256 and returns the first 8 bytes as a
    little-endian unsigned integer.  Equal paths always give equal seeds.
    """
    text = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def generator(seed: int) -> np.random.Generator:
    """Return a PCG64 generator for a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(seed))
