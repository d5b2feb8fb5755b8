"""Deterministic RNG derivation.

Every random decision in the simulator draws from a generator derived from the
experiment seed plus a tuple of context tags (round, participant id, purpose).
Derivation goes through SHA-256 so that streams for different contexts are
independent and no consumer can perturb another's stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Return a Generator keyed by (seed, *tags); identical arguments give identical streams."""
    material = repr((int(seed),) + tags).encode("utf-8")
    digest = hashlib.sha256(material).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))
