"""Counter-free deterministic randomness.

All stochastic choices (neighbor-cap sampling, random-attention admissions)
are pure functions of a pass key and stable edge uids, computed with a
splitmix64 finalizer. Removing or excluding one edge therefore never shifts
the draws made for any other edge, which is what makes exclusion bit-identical
to physical removal and keeps finite-difference probes of the loss well-posed.
"""

from __future__ import annotations

import numpy as np

_C1 = np.uint64(0x9E3779B97F4A7C15)
_C2 = np.uint64(0xBF58476D1CE4E5B9)
_C3 = np.uint64(0x94D049BB133111EB)


def splitmix64(x):
    """splitmix64 finalizer; accepts uint64 scalars or arrays, wraps mod 2^64."""
    with np.errstate(over="ignore"):
        z = np.uint64(x) + _C1 if np.isscalar(x) or np.ndim(x) == 0 else x.astype(np.uint64) + _C1
        z = (z ^ (z >> np.uint64(30))) * _C2
        z = (z ^ (z >> np.uint64(27))) * _C3
        return z ^ (z >> np.uint64(31))


def mix(*parts) -> np.uint64:
    """Fold integer parts into one uint64 key."""
    h = np.uint64(0)
    with np.errstate(over="ignore"):
        for p in parts:
            h = splitmix64(h + np.uint64(p))
    return h


def rank_keys(*parts) -> np.ndarray:
    """Elementwise key for each broadcast combination of parts.

    Ranking items by these keys yields a uniform random permutation, so the
    ``cap`` smallest keys form a uniform sample without replacement.
    """
    arrs = np.broadcast_arrays(*[np.asarray(p, dtype=np.uint64) for p in parts])
    h = np.zeros(arrs[0].shape, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for a in arrs:
            h = splitmix64(h + a)
    return h


def bernoulli(p: float, *parts) -> np.ndarray:
    """Deterministic Bernoulli(p) draw per broadcast combination of parts."""
    keys = rank_keys(*parts)
    if p >= 1.0:
        return np.ones(keys.shape, dtype=bool)
    if p <= 0.0:
        return np.zeros(keys.shape, dtype=bool)
    threshold = np.uint64(int(p * 2.0**64))
    return keys < threshold
