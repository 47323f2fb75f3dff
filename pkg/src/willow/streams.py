"""Deterministic random-stream derivation.

Every random quantity in willow is drawn from a counter-based Philox
generator keyed by (master seed, named stream path).  The path is an
arbitrary tuple of strings/ints (subcommand, replicate, node id, ...);
identical keys give identical streams on every platform, and sibling
streams are independent, so replicates can run in any order or in
parallel and merge by index.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _encode(part) -> list[int]:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream key parts must be non-negative")
        return [int(part) & 0xFFFFFFFF, (int(part) >> 32) & 0xFFFFFFFF]
    digest = hashlib.sha256(str(part).encode("utf8")).digest()
    return [int.from_bytes(digest[4 * i : 4 * i + 4], "little") for i in range(4)]


def seed_sequence(master_seed: int, *key) -> np.random.SeedSequence:
    spawn_key = []
    for part in key:
        spawn_key.extend(_encode(part))
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(spawn_key))


def stream(master_seed: int, *key) -> np.random.Generator:
    """Philox generator for the stream named by ``key``."""
    return np.random.Generator(np.random.Philox(seed_sequence(master_seed, *key)))


def raw_seeds(master_seed: int, n: int, *key) -> np.ndarray:
    """n uint64 seeds for compiled kernels, one per replicate."""
    return seed_sequence(master_seed, *key).generate_state(n, np.uint64)
