"""Deterministic RNG derivation from structured keys."""

from __future__ import annotations

import hashlib

import numpy as np


def _as_int(part: int | str) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def derive_rng(*parts: int | str) -> np.random.Generator:
    """Return a generator seeded from ``parts``, e.g. (seed, party_id, round, epoch).

    The same parts always give the same stream, independent of process or
    transport; strings are hashed with sha256 rather than ``hash()``.
    """
    return np.random.default_rng(np.random.SeedSequence([_as_int(p) for p in parts]))
