"""Seedable, portable random streams.

All stochastic choices in the package flow through numpy's PCG64 generator.
Stream-splitting rule: the child stream for item ``i`` under root seed ``s`` is
``PCG64(SeedSequence([s, i]))``; nested derivations append further integers.
numpy guarantees the PCG64 bit stream for a given SeedSequence is stable across
platforms and releases, which is what makes renders byte-identical across
processes.
"""

from __future__ import annotations

import numpy as np

# Upper bound for seeds drawn *from* a stream to key further streams.
SEED_SPACE = 2**63


def stream(*key: int) -> np.random.Generator:
    """Return the generator for an integer key path, e.g. stream(seed, index)."""
    if not key:
        raise ValueError("stream key must contain at least one integer")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a fresh 63-bit seed for keying a derived stream."""
    return int(rng.integers(0, SEED_SPACE))
