"""Deterministic named RNG substreams derived from a single experiment seed."""

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a Generator for (seed, name), stable across runs and platforms.

    The stream name is hashed with sha256 (Python's builtin hash is salted
    per process and would break reproducibility).
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))
