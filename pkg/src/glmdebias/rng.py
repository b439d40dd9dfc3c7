"""Reproducible random-number streams.

All randomness in the package flows through named, counter-based streams so
that any quantity is a pure function of a master seed plus a derivation path.
Streams are built on numpy's Philox generator (a 64-bit counter-based
generator) keyed through ``SeedSequence``: stream ``(seed, a, b, ...)`` is
``Philox(SeedSequence((seed, a, b, ...)))``.  Replication ``r`` of a
simulation uses path ``(master_seed, CELL_TAG, cell_index, r)``, which makes
results independent of execution order and parallel scheduling.
"""

from __future__ import annotations

import numpy as np

# Fixed tags keep unrelated stream families from colliding when they share a
# master seed.
SPLIT_TAG = 101
FOLD_TAG = 102
CELL_TAG = 103
REDRAW_TAG = 104


def stream(*path: int) -> np.random.Generator:
    """Return the generator for a derivation path of integers."""
    if not path:
        raise ValueError("stream path must be nonempty")
    ints = tuple(int(p) & 0xFFFFFFFFFFFFFFFF for p in path)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(ints)))


def permutation(n: int, *path: int) -> np.ndarray:
    """Deterministic permutation of range(n) for the given path."""
    return stream(*path).permutation(n)


def child_seed(*path: int) -> int:
    """Derive a 63-bit child seed from a path (for nested components)."""
    return int(stream(*path).integers(0, 2**63 - 1))
