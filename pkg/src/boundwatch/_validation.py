"""Input validation and seeding helpers shared across modules."""

from __future__ import annotations

import numbers

import numpy as np


def as_rng(rng) -> np.random.Generator:
    """Return a Generator; integers are treated as seeds.

    Objects exposing ``standard_normal`` pass through unchanged.
    """
    if isinstance(rng, np.random.Generator) or hasattr(rng, "standard_normal"):
        return rng
    if isinstance(rng, (numbers.Integral, np.integer)):
        return np.random.default_rng(int(rng))
    raise TypeError(f"expected an integer seed or numpy Generator, got {type(rng).__name__}")


def derive_seed(*keys: int) -> int:
    """Counter-based seed split: a 64-bit seed determined by the integer keys."""
    seq = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def check_open_unit(value, name: str) -> float:
    value = float(value)
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")
    return value


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, (numbers.Integral, np.integer)):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_costs(costs, name: str = "costs") -> np.ndarray:
    """Validate a non-empty array of costs in [0, 1]."""
    arr = np.asarray(costs, dtype=float)
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")
    return arr
