"""Deterministic named substreams derived from one root seed."""

from __future__ import annotations

import hashlib

import numpy as np


def _key_word(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("substream key integers must be nonnegative")
        return int(part)
    digest = hashlib.blake2s(str(part).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "big")


def substream(seed: int, *key) -> np.random.Generator:
    """Generator for the substream named by ``key`` under the given root seed.

    The same (seed, key) pair always yields the same stream and distinct keys
    yield independent streams, so truth, per-node measurement noise, and any
    auxiliary randomness never disturb one another no matter which consumers
    are active.
    """
    words = tuple(_key_word(p) for p in key)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=words))
