"""Diagonal Gaussian distributions over policy-weight vectors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from boundwatch._validation import as_rng

DEFAULT_MARGIN = 0.01

RandomSource = Union[int, np.random.Generator]


@dataclass(frozen=True, eq=False)
class DiagonalGaussian:
    """Gaussian N(mean, diag(exp(log_variance))).

    Parameters
    ----------
    mean : array-like of shape (d,)
    log_variance : array-like of shape (d,)
        Per-dimension log variance. Must be finite.
    """

    mean: np.ndarray
    log_variance: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        log_var = np.array(self.log_variance, dtype=float).reshape(-1)
        if mean.size < 1:
            raise ValueError("dimension must be at least 1")
        if mean.shape != log_var.shape:
            raise ValueError(
                f"mean and log_variance lengths differ: {mean.size} != {log_var.size}"
            )
        if not np.all(np.isfinite(log_var)):
            raise ValueError("log_variance entries must be finite")
        if not np.all(np.isfinite(mean)):
            raise ValueError("mean entries must be finite")
        mean.setflags(write=False)
        log_var.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_variance", log_var)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_variance)

    @classmethod
    def isotropic(cls, mean, variance: float) -> "DiagonalGaussian":
        mean = np.asarray(mean, dtype=float).reshape(-1)
        return cls(mean, np.full(mean.size, math.log(variance)))

    def __eq__(self, other):
        if not isinstance(other, DiagonalGaussian):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(
            self.log_variance, other.log_variance
        )

    def __hash__(self):
        return hash((self.mean.tobytes(), self.log_variance.tobytes()))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "log_variance": self.log_variance.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "DiagonalGaussian":
        extra = set(data) - {"mean", "log_variance"}
        if extra:
            raise ValueError(f"unknown keys in Gaussian record: {sorted(extra)}")
        return cls(data["mean"], data["log_variance"])


@dataclass(frozen=True, eq=False)
class WeightSample:
    """A single weight vector drawn from a DiagonalGaussian."""

    weights: np.ndarray
    seed_tag: int = 0

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __eq__(self, other):
        if not isinstance(other, WeightSample):
            return NotImplemented
        return self.seed_tag == other.seed_tag and np.array_equal(self.weights, other.weights)

    def __hash__(self):
        return hash((self.weights.tobytes(), self.seed_tag))


def _check_same_dim(a: int, b: int):
    if a != b:
        raise ValueError(f"dimension mismatch: {a} != {b}")


def sample(dist: DiagonalGaussian, rng: RandomSource, seed_tag: int | None = None) -> WeightSample:
    """Draw ``mean + sqrt(variance) * z`` with ``z`` standard normal from `rng`.

    An integer `rng` is used as the seed and, unless given, as the seed tag.
    """
    if seed_tag is None:
        seed_tag = int(rng) if isinstance(rng, (int, np.integer)) else 0
    z = as_rng(rng).standard_normal(dist.dim)
    return WeightSample(dist.mean + np.exp(0.5 * dist.log_variance) * z, int(seed_tag))


def sample_many(dist: DiagonalGaussian, k: int, rng: RandomSource) -> tuple[np.ndarray, np.ndarray]:
    """Draw `k` weight vectors; returns ``(weights, z)`` each of shape (k, d)."""
    z = as_rng(rng).standard_normal((k, dist.dim))
    return dist.mean + np.exp(0.5 * dist.log_variance) * z, z


def log_density(dist: DiagonalGaussian, w) -> float | np.ndarray:
    """Log density of `w` under `dist`.

    `w` may be a WeightSample, a vector of shape (d,), or a batch of shape (k, d),
    in which case an array of k log densities is returned.
    """
    x = w.weights if isinstance(w, WeightSample) else np.asarray(w, dtype=float)
    _check_same_dim(x.shape[-1], dist.dim)
    var = dist.variance
    terms = -0.5 * (np.log(2.0 * np.pi) + dist.log_variance) - (x - dist.mean) ** 2 / (2.0 * var)
    out = terms.sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def is_feasible(p: DiagonalGaussian, p0: DiagonalGaussian) -> bool:
    """Whether D2(p || p0) is finite, i.e. s_i < 2 s0_i in every dimension."""
    _check_same_dim(p.dim, p0.dim)
    return bool(np.all(p.variance < 2.0 * p0.variance))


def renyi2_divergence(p: DiagonalGaussian, p0: DiagonalGaussian) -> float:
    """Order-2 Renyi divergence ``ln E_{w~p0}[(p(w)/p0(w))^2]``.

    Returns ``inf`` when the posterior variance is at least twice the prior
    variance in some dimension.
    """
    _check_same_dim(p.dim, p0.dim)
    s, s0 = p.variance, p0.variance
    mixed = 2.0 * s0 - s
    if np.any(mixed <= 0.0):
        return math.inf
    diff = p.mean - p0.mean
    # ln(mixed * s / s0^2) evaluated in log space
    log_det_term = np.log(mixed) + p.log_variance - 2.0 * p0.log_variance
    return float(np.sum(diff**2 / mixed) - 0.5 * np.sum(log_det_term))


def renyi2_gradient(p: DiagonalGaussian, p0: DiagonalGaussian) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of `renyi2_divergence` w.r.t. ``(mean, log_variance)`` of `p`."""
    _check_same_dim(p.dim, p0.dim)
    s, s0 = p.variance, p0.variance
    mixed = 2.0 * s0 - s
    if np.any(mixed <= 0.0):
        raise ValueError("divergence is infinite; project variances first")
    diff = p.mean - p0.mean
    grad_mean = 2.0 * diff / mixed
    grad_s = diff**2 / mixed**2 + 0.5 / mixed - 0.5 / s
    return grad_mean, grad_s * s


def project_variances(
    p: DiagonalGaussian, p0: DiagonalGaussian, margin: float = DEFAULT_MARGIN
) -> DiagonalGaussian:
    """Clamp each variance to at most ``(2 - margin) * s0`` so D2 stays finite."""
    if not 0.0 < margin < 1.0:
        raise ValueError(f"margin must lie in (0, 1), got {margin}")
    _check_same_dim(p.dim, p0.dim)
    cap = math.log(2.0 - margin) + p0.log_variance
    if np.all(p.log_variance <= cap):
        return p
    return DiagonalGaussian(p.mean, np.minimum(p.log_variance, cap))
