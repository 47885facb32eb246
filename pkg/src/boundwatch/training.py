"""Posterior training by minimizing the PAC-Bayes upper bound.

Two gradient estimators over ``psi = (mean, log_variance)`` are provided:

* `es_gradient` -- score-function (evolution strategies) estimate of both the
  empirical-cost and the regularizer gradient; needs only black-box costs.
* `reparam_gradient` -- pathwise estimate through ``w = mean + sqrt(s) * z`` plus
  the closed-form divergence gradient; SmoothQuadratic only.

Gradient vectors are laid out as ``concatenate([d/d mean, d/d log_variance])``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from boundwatch._validation import as_rng, check_open_unit, check_positive_int
from boundwatch.benchmarks import (
    PRIMITIVE_NAV,
    SMOOTH_QUADRATIC,
    BenchmarkSpec,
    EnvironmentDataset,
    batch_costs,
    cost_gradient,
    distance_cost,
    nav_features,
)
from boundwatch.certificates import MIN_TRAINING_SIZE, build_certificate, regularizer
from boundwatch.distributions import (
    DEFAULT_MARGIN,
    DiagonalGaussian,
    WeightSample,
    log_density,
    project_variances,
    renyi2_divergence,
    renyi2_gradient,
    sample,
    sample_many,
)

ES = "ES"
REPARAM = "Reparam"
R_FLOOR = 1e-12


class TrainingDivergedError(RuntimeError):
    """Raised when posterior parameters become non-finite."""

    def __init__(self, iteration: int):
        super().__init__(f"posterior parameters became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    es_samples: int = 16
    iterations: int = 50
    seed: int = 0
    delta: float = 0.01
    projection_margin: float = DEFAULT_MARGIN
    method: str = ES

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        check_positive_int(self.es_samples, "es_samples", minimum=2)
        check_positive_int(self.iterations, "iterations", minimum=0)
        check_open_unit(self.delta, "delta")
        check_open_unit(self.projection_margin, "projection_margin")
        if self.method not in (ES, REPARAM):
            raise ValueError(f"method must be {ES!r} or {REPARAM!r}, got {self.method!r}")


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    bound: float
    cost: float
    d2: float
    grad_norm: float


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def bounds(self) -> np.ndarray:
        return np.array([r.bound for r in self.records])

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "bound", "cost", "d2", "grad_norm"])
            for r in self.records:
                writer.writerow([r.iteration] + [repr(float(v)) for v in (r.bound, r.cost, r.d2, r.grad_norm)])
        return path


def _safe_regularizer(d2: float, m: int, delta: float, notes: list | None = None) -> float:
    reg = regularizer(d2, m, delta)
    if reg < R_FLOOR:
        if notes is not None:
            notes.append(f"regularizer {reg:.3e} clamped to {R_FLOOR:.0e}")
        reg = R_FLOOR
    return reg


def bound_objective(posterior, prior, mean_cost: float, m: int, delta: float) -> float:
    """``mean_cost + sqrt(R)`` for the given posterior."""
    return mean_cost + math.sqrt(regularizer(renyi2_divergence(posterior, prior), m, delta))


def _es_terms(posterior, prior, dataset, spec, k, delta, rng, notes=None):
    k = check_positive_int(k, "k", minimum=2)
    d2 = renyi2_divergence(posterior, prior)
    if math.isinf(d2):
        raise ValueError("D2 is infinite; project variances before estimating gradients")
    m = dataset.size
    reg = _safe_regularizer(d2, m, delta, notes)
    w, z = sample_many(posterior, k, rng)
    env_mean_cost = batch_costs(spec, dataset, w).mean(axis=1)  # (k,)
    log_ratio = log_density(posterior, w) - log_density(prior, w)
    # d/dpsi of E_P[P/P0] picks up the ratio's own dependence on psi, hence 2m not 4m
    reg_weight = np.exp(log_ratio - d2) / (2.0 * m * math.sqrt(reg))
    weight = env_mean_cost + reg_weight
    score_mean = z * np.exp(-0.5 * posterior.log_variance)
    score_logvar = 0.5 * (z**2 - 1.0)
    grad = np.concatenate([weight @ score_mean, weight @ score_logvar]) / k
    return grad, float(env_mean_cost.mean()), d2, reg


def es_gradient(
    posterior: DiagonalGaussian,
    prior: DiagonalGaussian,
    dataset: EnvironmentDataset,
    spec: BenchmarkSpec,
    k: int,
    delta: float,
    rng,
) -> np.ndarray:
    """Score-function estimate of the gradient of ``C_S + sqrt(R)``.

    The same k weight draws are shared across all environments. The likelihood
    ratio is formed in log space before exponentiation.
    """
    return _es_terms(posterior, prior, dataset, spec, k, delta, as_rng(rng))[0]


def _reparam_terms(posterior, prior, dataset, spec, k, delta, rng, notes=None):
    if spec.family != SMOOTH_QUADRATIC:
        raise ValueError("reparameterized gradients need a differentiable family (SmoothQuadratic)")
    k = check_positive_int(k, "k", minimum=1)
    d2 = renyi2_divergence(posterior, prior)
    if math.isinf(d2):
        raise ValueError("D2 is infinite; project variances before estimating gradients")
    m = dataset.size
    reg = _safe_regularizer(d2, m, delta, notes)
    w, z = sample_many(posterior, k, rng)
    dcost = cost_gradient(spec, dataset, w).mean(axis=1)  # (k, d)
    std = np.exp(0.5 * posterior.log_variance)
    g_mean = dcost.mean(axis=0)
    g_logvar = (dcost * z).mean(axis=0) * 0.5 * std
    d2_mean, d2_logvar = renyi2_gradient(posterior, prior)
    scale = 1.0 / (4.0 * m * math.sqrt(reg))
    grad = np.concatenate([g_mean + scale * d2_mean, g_logvar + scale * d2_logvar])
    cost = float(batch_costs(spec, dataset, w).mean())
    return grad, cost, d2, reg


def reparam_gradient(
    posterior: DiagonalGaussian,
    prior: DiagonalGaussian,
    dataset: EnvironmentDataset,
    spec: BenchmarkSpec,
    k: int,
    delta: float,
    rng,
) -> np.ndarray:
    """Pathwise gradient of the sampled bound through ``w = mean + sqrt(s) * z``.

    Clamped costs contribute a zero subgradient.
    """
    return _reparam_terms(posterior, prior, dataset, spec, k, delta, as_rng(rng))[0]


def sampled_bound(posterior, prior, dataset, spec, z, delta) -> float:
    """Bound objective evaluated on fixed standard-normal draws `z` (shape (k, d))."""
    w = posterior.mean + np.exp(0.5 * posterior.log_variance) * np.asarray(z)
    cost = float(batch_costs(spec, dataset, w).mean())
    return bound_objective(posterior, prior, cost, dataset.size, delta)


def _step(psi_mean, psi_logvar, grad, lr):
    d = psi_mean.size
    return psi_mean - lr * grad[:d], psi_logvar - lr * grad[d:]


def train(
    prior: DiagonalGaussian,
    dataset: EnvironmentDataset,
    spec: BenchmarkSpec,
    config: TrainConfig,
) -> tuple[DiagonalGaussian, TrainTrace]:
    """Plain gradient descent on the bound starting from the prior.

    Deterministic in ``(prior, dataset, config)``. Variances are projected back
    into the finite-divergence region after every step.
    """
    check_positive_int(dataset.size, "dataset size", minimum=MIN_TRAINING_SIZE)
    if prior.dim != spec.policy_dim:
        raise ValueError(f"prior dimension {prior.dim} != policy dimension {spec.policy_dim}")
    terms = _es_terms if config.method == ES else _reparam_terms
    rng = as_rng(int(config.seed))
    trace = TrainTrace()
    posterior = prior
    for it in range(config.iterations):
        grad, cost, d2, reg = terms(
            posterior, prior, dataset, spec, config.es_samples, config.delta, rng, trace.warnings
        )
        trace.records.append(
            TraceRecord(it, cost + math.sqrt(reg), cost, d2, float(np.linalg.norm(grad)))
        )
        mean, logvar = _step(posterior.mean, posterior.log_variance, grad, config.learning_rate)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(logvar))):
            raise TrainingDivergedError(it)
        posterior = project_variances(DiagonalGaussian(mean, logvar), prior, config.projection_margin)
        if math.isinf(renyi2_divergence(posterior, prior)):
            raise TrainingDivergedError(it)
    for note in trace.warnings[:1]:
        warnings.warn(note, RuntimeWarning, stacklevel=2)
    return posterior, trace


def finalize_policy(posterior: DiagonalGaussian, policy_seed: int) -> WeightSample:
    """Draw the single deterministic policy that all certificates refer to."""
    return sample(posterior, int(policy_seed), seed_tag=int(policy_seed))


def fit_prior_mean(spec: BenchmarkSpec, dataset: EnvironmentDataset, ridge: float = 1e-2) -> np.ndarray:
    """Least-squares prior mean for PrimitiveNav.

    Scores are regressed onto each primitive's clearance ``1 - cost`` so larger
    scores go to primitives that keep farther from obstacles. Use a dataset
    disjoint from the PAC-Bayes training set.
    """
    if spec.family != PRIMITIVE_NAV:
        raise ValueError("fit_prior_mean applies to PrimitiveNav")
    geom = spec.family_params
    obs, dmin = nav_features(spec, dataset)
    targets = 1.0 - distance_cost(geom, dmin)
    gram = obs.T @ obs + ridge * len(obs) * np.eye(obs.shape[1])
    coef = np.linalg.solve(gram, obs.T @ targets)  # (B+1, K)
    return coef.T.reshape(-1)


class PACBayesPolicy(BaseEstimator):
    """Train a posterior, fix one policy from it, and certify that policy.

    Parameters
    ----------
    benchmark : BenchmarkSpec
    prior : DiagonalGaussian, optional
        Defaults to ``N(0, prior_variance * I)``.
    prior_variance : float
    method : {"ES", "Reparam"}
    learning_rate, es_samples, iterations, seed, delta, projection_margin
        See `TrainConfig`.
    policy_seed : int
        Seed of the final policy draw.

    Attributes
    ----------
    prior_, posterior_ : DiagonalGaussian
    trace_ : TrainTrace
    policy_ : WeightSample
    certificate_ : Certificate
    """

    def __init__(
        self,
        benchmark=None,
        prior=None,
        prior_variance=1.0,
        method=ES,
        learning_rate=0.05,
        es_samples=16,
        iterations=50,
        seed=0,
        delta=0.01,
        projection_margin=DEFAULT_MARGIN,
        policy_seed=0,
    ):
        self.benchmark = benchmark
        self.prior = prior
        self.prior_variance = prior_variance
        self.method = method
        self.learning_rate = learning_rate
        self.es_samples = es_samples
        self.iterations = iterations
        self.seed = seed
        self.delta = delta
        self.projection_margin = projection_margin
        self.policy_seed = policy_seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            es_samples=self.es_samples,
            iterations=self.iterations,
            seed=self.seed,
            delta=self.delta,
            projection_margin=self.projection_margin,
            method=self.method,
        )

    def fit(self, dataset: EnvironmentDataset, y=None):
        if self.benchmark is None:
            raise ValueError("benchmark must be set before fitting")
        spec = self.benchmark
        prior = self.prior
        if prior is None:
            prior = DiagonalGaussian.isotropic(np.zeros(spec.policy_dim), self.prior_variance)
        posterior, trace = train(prior, dataset, spec, self._config())
        policy = finalize_policy(posterior, self.policy_seed)
        train_cost = float(batch_costs(spec, dataset, policy)[0].mean())
        self.prior_ = prior
        self.posterior_ = posterior
        self.trace_ = trace
        self.policy_ = policy
        self.certificate_ = build_certificate(
            train_cost, renyi2_divergence(posterior, prior), dataset.size, self.delta, self.policy_seed
        )
        return self

    def predict(self, dataset: EnvironmentDataset) -> np.ndarray:
        """Per-environment costs of the fixed policy."""
        check_is_fitted(self, "policy_")
        return batch_costs(self.benchmark, dataset, self.policy_)[0]

    def score(self, dataset: EnvironmentDataset, y=None) -> float:
        """Negative mean cost (larger is better)."""
        return -float(self.predict(dataset).mean())
