"""Deterministic, splittable random streams.

All randomness in the package flows through numpy's Philox counter-based
generator. Child streams are derived by hashing ``master || label`` with
SHA-256, so derivation is order-independent and collision-resistant, and a
fixed master seed reproduces every stage of a pipeline bit-exactly.
"""

import hashlib

import numpy as np


def seed_stream(master: int, label: str) -> int:
    """Derive a 64-bit child seed from a master seed and a stream label."""
    digest = hashlib.sha256(f"{master & 0xFFFFFFFFFFFFFFFF}|{label}".encode())
    return int.from_bytes(digest.digest()[:8], "little")


def make_rng(seed: int) -> np.random.Generator:
    """Philox generator keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=seed & 0xFFFFFFFFFFFFFFFF))


def stream(master: int, label: str) -> np.random.Generator:
    """Generator for the child stream ``label`` of ``master``."""
    return make_rng(seed_stream(master, label))
