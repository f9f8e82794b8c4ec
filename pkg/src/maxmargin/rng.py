"""Deterministic seed derivation.

All randomness in the package flows from a single integer seed through
named derivation, so results do not depend on call order or scheduling.
"""

import hashlib

import numpy as np


def derive_seed(root: int, *tokens) -> int:
    """Derive a child seed from a root seed and a path of naming tokens.

    Tokens may be ints or strings; the derivation is a stable hash, so the
    same (root, tokens) pair always yields the same child seed.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode())
    for t in tokens:
        h.update(b"/")
        h.update(str(t).encode())
    return int.from_bytes(h.digest(), "little")


def generator(root: int, *tokens) -> np.random.Generator:
    """A fresh PCG64 generator seeded by name derivation."""
    return np.random.Generator(np.random.PCG64(derive_seed(root, *tokens)))
