"""Deterministic RNG streams keyed by (seed, tag, ...) tuples."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    value = int(part)
    if value < 0:
        raise ValueError(f"seed components must be non-negative, got {value}")
    return value


def stream(*parts) -> np.random.Generator:
    """Independent generator for the given key path.

    Strings are hashed with CRC-32 so keys like ``(seed, "dropout", it, site)``
    are stable across processes and Python versions.
    """
    return np.random.default_rng(np.random.SeedSequence([_key(p) for p in parts]))


def derive_seed(*parts) -> int:
    """A 32-bit integer seed derived from a key path."""
    return int(np.random.SeedSequence([_key(p) for p in parts]).generate_state(1)[0])
