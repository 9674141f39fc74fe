"""Counter-based random streams keyed by (seed, consumer, index...).

Each consumer (dropout, shuffling, batching, init, ...) asks for its own
stream by name, so draws in one place never shift draws in another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream key parts must be non-negative, got {part}")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def _seed_sequence(seed: int, keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1), spawn_key=tuple(_key(k) for k in keys))


def stream(seed: int, *keys) -> np.random.Generator:
    """A Philox generator for ``seed`` split by the given key path."""
    return np.random.Generator(np.random.Philox(_seed_sequence(seed, keys)))


def derive_seed(seed: int, *keys) -> int:
    """A child integer seed, for handing to functions that take a seed."""
    return int(_seed_sequence(seed, keys).generate_state(1, dtype=np.uint64)[0] >> 1)
