"""Deterministic random stream derivation.

Every stochastic component draws from its own named stream derived from the
run seed, so the draw order of one component never perturbs another. This is
what makes results independent of worker count and execution order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Return a Generator unique to (seed, keys).

    Keys may be strings, ints, or tuples; their repr feeds a hash so
    distinct key paths give independent streams.
    """
    digest = hashlib.blake2s(repr(keys).encode("utf-8"), digest_size=8).digest()
    entropy = [seed & 0xFFFFFFFF, int.from_bytes(digest, "big")]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
