"""Deterministic random-stream derivation from a single root seed."""

from __future__ import annotations

import zlib

import numpy as np


def seed_for(root_seed: int, label: str) -> np.random.SeedSequence:
    """Derive a child seed sequence from the root seed and a stable label."""
    return np.random.SeedSequence(entropy=int(root_seed),
                                  spawn_key=(zlib.crc32(label.encode("utf-8")),))


def generator(root_seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(seed_for(root_seed, label))
