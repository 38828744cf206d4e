"""Deterministic seed derivation for independent simulation streams.

Every random quantity in the package is drawn from a ``numpy`` generator
seeded through :func:`mix_seed`, so a master seed plus a path of labels
(experiment id, grid cell, trial index, node id, ...) fully determines the
stream. Distinct paths give statistically independent streams thanks to the
avalanche behaviour of splitmix64.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> int:
    """One step of the splitmix64 avalanche mixer (public-domain constants)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _part_to_u64(part: int | str) -> int:
    if isinstance(part, str):
        # blake2b is stable across processes, unlike hash().
        return int.from_bytes(hashlib.blake2b(part.encode(), digest_size=8).digest(), "big")
    return part & _MASK64


def mix_seed(*parts: int | str) -> int:
    """Fold integer and string labels into a single 64-bit seed."""
    state = 0
    for part in parts:
        state = splitmix64(state ^ _part_to_u64(part))
    return state


def rng_from(*parts: int | str) -> np.random.Generator:
    """Generator for the stream identified by the given label path."""
    return np.random.default_rng(mix_seed(*parts))
