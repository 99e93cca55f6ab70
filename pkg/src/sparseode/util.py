"""Small shared helpers: RNG substreams, flattening conventions, CSV formatting."""

from __future__ import annotations

import hashlib

import numpy as np

# Parameter matrices are flattened by stacking columns (Fortran order)
# throughout: flat index a = row + col * d.
FLATTEN_ORDER = "F"


def flatten(B: np.ndarray) -> np.ndarray:
    return np.asarray(B, dtype=float).flatten(order=FLATTEN_ORDER)


def unflatten(beta: np.ndarray, d: int) -> np.ndarray:
    return np.asarray(beta, dtype=float).reshape((d, d), order=FLATTEN_ORDER)


def flat_index(row: int, col: int, d: int) -> int:
    return row + col * d


def coord_rows_cols(d: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column indices of each flat coordinate, in flat order."""
    a = np.arange(d * d)
    return a % d, a // d


def _tag_to_ints(tag) -> tuple[int, ...]:
    if isinstance(tag, (int, np.integer)):
        return (int(tag),)
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return (int.from_bytes(digest[:4], "little"),)


def substream(seed: int, *tags) -> np.random.Generator:
    """Reproducible generator for (seed, tags): independent spawn-key substream.

    Integer tags index replications; string tags name purposes (hashed to a
    stable 32-bit key), so all randomness flows from one seed.
    """
    key: tuple[int, ...] = ()
    for tag in tags:
        key = key + _tag_to_ints(tag)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def fmt_float(x: float) -> str:
    """Full-precision decimal (17 significant digits) for CSV output."""
    return format(float(x), ".17g")
