"""Seed substreams.

All randomness in the package flows from a single top-level 64-bit seed.
Stages and inner loops derive independent substreams by hashing
(seed, name) so that no stage reads ambient entropy and adding a consumer
never shifts the draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["substream_seed", "substream"]


def substream_seed(seed: int, name: str) -> int:
    """Derive a 64-bit child seed for the named substream."""
    payload = f"{seed:#x}/{name}".encode()
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, name: str) -> np.random.Generator:
    """A generator whose draws depend only on (seed, name)."""
    return np.random.default_rng(substream_seed(seed, name))
