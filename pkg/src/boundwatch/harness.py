"""Seeded Monte-Carlo experiments: guarantee validation, detector sweeps, rate tuning.

Every random quantity is drawn from a seed derived from the master seed and a
``(stream, cell, trial)`` counter, so results do not depend on how work is split
across threads. ``BOUNDWATCH_THREADS`` caps the worker count.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from boundwatch._validation import check_positive_int, derive_seed
from boundwatch.benchmarks import (
    PRIMITIVE_NAV,
    BenchmarkSpec,
    EnvironmentDataset,
    NavParams,
    QuadraticParams,
    batch_costs,
    expected_cost_oracle,
    nuisance_shift,
    params_from_dict,
    params_to_dict,
    policy_scores,
    sample_dataset,
)
from boundwatch.certificates import Certificate, build_certificate
from boundwatch.detectors import (
    MAX_LOGIT,
    MSP,
    OOD_CODE,
    UNKNOWN_CODE,
    WD_CODE,
    anomaly_scores,
    calibrate_scores,
    hypothesis_codes,
    hypothesis_indicators,
    interval_codes,
    interval_indicators,
)
from boundwatch.distributions import DiagonalGaussian, WeightSample, renyi2_divergence
from boundwatch.training import TrainConfig, TrainTrace, finalize_policy, fit_prior_mean, train

CONFIG_VERSION = 1

# seed streams
_PRIOR, _TRAIN, _POLICY, _HOLDOUT, _ORACLE, _CELL, _VALID = range(1, 8)

DETECTORS = ("ci", "ht", "msp", "maxlogit")
VERDICTS = ("OOD", "WD", "UNKNOWN")
_CODE_NAMES = {OOD_CODE: "OOD", WD_CODE: "WD", UNKNOWN_CODE: "UNKNOWN"}


def worker_count() -> int:
    raw = os.environ.get("BOUNDWATCH_THREADS", "")
    try:
        value = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        raise ValueError(f"BOUNDWATCH_THREADS must be an integer, got {raw!r}") from None
    return max(1, value)


def _parallel_map(fn, items):
    items = list(items)
    workers = min(worker_count(), max(1, len(items)))
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def binomial_se(rate: float, trials: int) -> float:
    return math.sqrt(max(rate * (1.0 - rate), 0.0) / trials) if trials > 0 else float("nan")


# --------------------------------------------------------------------------
# Configuration


def _strict(cls, data: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class PriorSettings:
    """Isotropic prior; for PrimitiveNav the mean is fit on a disjoint dataset."""

    variance: float = 1.0
    fit_size: int = 0
    ridge: float = 1e-2


@dataclass(frozen=True)
class DetectorSettings:
    alpha_o: float = 0.05
    alpha_w: float = 0.05
    delta_o: float = 0.01
    delta_o_prime: float = 0.04
    delta_w: float = 0.01
    delta_w_prime: float = 0.04
    baseline_quantile: float = 0.95
    baseline_holdout: int = 1000

    def __post_init__(self):
        for name in ("alpha_o", "alpha_w", "delta_o", "delta_o_prime", "delta_w", "delta_w_prime"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        if self.delta_o + self.delta_o_prime >= 1 or self.delta_w + self.delta_w_prime >= 1:
            raise ValueError("delta + delta' must be below 1 on each side")

    @property
    def fp_bound(self) -> float:
        return self.delta_o + self.delta_o_prime

    @property
    def fn_bound(self) -> float:
        return self.delta_w + self.delta_w_prime


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: BenchmarkSpec
    train_params: object
    test_param_grid: tuple = ()
    shift_params: object = None
    include_nuisance_cell: bool = True
    m: int = 200
    n: int = 10
    trials_per_cell: int = 2000
    datasets_per_trial: int = 5
    oracle_samples: int = 100_000
    prior: PriorSettings = PriorSettings()
    training: TrainConfig = TrainConfig()
    detectors: DetectorSettings = DetectorSettings()
    rate_grid: tuple = ((0.05, 0.05), (0.40, 0.40), (0.90, 0.10))
    seed: int = 0
    output_dir: str = "results"
    run_id: str = "run"

    def __post_init__(self):
        check_positive_int(self.m, "m", minimum=8)
        check_positive_int(self.n, "n")
        check_positive_int(self.trials_per_cell, "trials_per_cell")
        check_positive_int(self.datasets_per_trial, "datasets_per_trial")
        check_positive_int(self.oracle_samples, "oracle_samples", minimum=1000)
        object.__setattr__(self, "test_param_grid", tuple(self.test_param_grid))
        object.__setattr__(self, "rate_grid", tuple(tuple(float(v) for v in r) for r in self.rate_grid))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        version = data.pop("version", None)
        if version != CONFIG_VERSION:
            raise ValueError(f"config 'version' must be {CONFIG_VERSION}, got {version!r}")
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "benchmark" not in data or "train_params" not in data:
            raise ValueError("config needs 'benchmark' and 'train_params'")
        spec = BenchmarkSpec.from_dict(data["benchmark"])
        data["benchmark"] = spec
        data["train_params"] = params_from_dict(spec, data["train_params"])
        data["test_param_grid"] = tuple(params_from_dict(spec, p) for p in data.get("test_param_grid", ()))
        if data.get("shift_params") is not None:
            data["shift_params"] = params_from_dict(spec, data["shift_params"])
        if "prior" in data:
            data["prior"] = _strict(PriorSettings, data["prior"], "prior")
        if "training" in data:
            data["training"] = _strict(TrainConfig, data["training"], "training")
        if "detectors" in data:
            data["detectors"] = _strict(DetectorSettings, data["detectors"], "detectors")
        return cls(**data)

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "benchmark": self.benchmark.to_dict(),
            "train_params": params_to_dict(self.train_params),
            "test_param_grid": [params_to_dict(p) for p in self.test_param_grid],
            "shift_params": None if self.shift_params is None else params_to_dict(self.shift_params),
            "include_nuisance_cell": self.include_nuisance_cell,
            "m": self.m,
            "n": self.n,
            "trials_per_cell": self.trials_per_cell,
            "datasets_per_trial": self.datasets_per_trial,
            "oracle_samples": self.oracle_samples,
            "prior": asdict(self.prior),
            "training": asdict(self.training),
            "detectors": asdict(self.detectors),
            "rate_grid": [list(r) for r in self.rate_grid],
            "seed": self.seed,
            "output_dir": self.output_dir,
            "run_id": self.run_id,
        }


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with path.open() as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(data)


# --------------------------------------------------------------------------
# Policy preparation


@dataclass
class PreparedPolicy:
    prior: DiagonalGaussian
    posterior: DiagonalGaussian
    policy: WeightSample
    training_set: EnvironmentDataset
    trace: TrainTrace
    cert_upper: Certificate
    cert_lower: Certificate
    training_costs: np.ndarray


def build_prior(config: ExperimentConfig, seed: int) -> DiagonalGaussian:
    spec = config.benchmark
    mean = np.zeros(spec.policy_dim)
    if spec.family == PRIMITIVE_NAV and config.prior.fit_size > 0:
        prior_set = sample_dataset(spec, config.train_params, config.prior.fit_size, derive_seed(seed, _PRIOR))
        mean = fit_prior_mean(spec, prior_set, config.prior.ridge)
    return DiagonalGaussian.isotropic(mean, config.prior.variance)


def prepare_policy(config: ExperimentConfig, seed: int | None = None, prior=None) -> PreparedPolicy:
    """Sample S, train the posterior, fix the policy, and certify it."""
    seed = config.seed if seed is None else seed
    spec = config.benchmark
    prior = build_prior(config, seed) if prior is None else prior
    training_set = sample_dataset(spec, config.train_params, config.m, derive_seed(seed, _TRAIN))
    train_cfg = replace(config.training, seed=derive_seed(seed, _TRAIN, config.training.seed))
    posterior, trace = train(prior, training_set, spec, train_cfg)
    policy = finalize_policy(posterior, derive_seed(seed, _POLICY))
    costs = batch_costs(spec, training_set, policy)[0]
    d2 = renyi2_divergence(posterior, prior)
    det = config.detectors
    cert_upper = build_certificate(costs.mean(), d2, config.m, det.delta_o, policy.seed_tag)
    cert_lower = build_certificate(costs.mean(), d2, config.m, det.delta_w, policy.seed_tag)
    return PreparedPolicy(prior, posterior, policy, training_set, trace, cert_upper, cert_lower, costs)


def _trial_datasets(spec, params, n, trials, seed, stream, cell) -> EnvironmentDataset:
    """`trials` datasets of size n, each from its own derived seed, stacked row-wise."""
    parts = [sample_dataset(spec, params, n, derive_seed(seed, stream, cell, t)) for t in range(trials)]
    arrays = {k: np.concatenate([p.arrays[k] for p in parts]) for k in parts[0].arrays}
    return EnvironmentDataset(params, derive_seed(seed, stream, cell), arrays)


# --------------------------------------------------------------------------
# Detection sweep


@dataclass
class CellResult:
    index: int
    label: str
    params: dict
    oracle_cost: float
    oracle_se: float
    gap: float
    gap_se: float
    trials: int
    fractions: dict
    mean_indicators: dict

    def fraction(self, detector: str, verdict: str) -> float:
        return self.fractions[detector][verdict]

    def fraction_se(self, detector: str, verdict: str) -> float:
        return binomial_se(self.fraction(detector, verdict), self.trials)


@dataclass
class SweepResult:
    run_id: str
    n: int
    train_oracle_cost: float
    train_oracle_se: float
    certificate: dict
    detector_settings: dict
    baseline_thresholds: dict
    cells: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SweepResult":
        data = dict(data)
        data["cells"] = [CellResult(**c) for c in data.get("cells", [])]
        return cls(**data)


def _cell_list(config: ExperimentConfig):
    cells = [(f"cell{i}", p) for i, p in enumerate(config.test_param_grid)]
    if config.include_nuisance_cell:
        cells.append(("nuisance", nuisance_shift(config.train_params)))
    return cells


def _fractions(codes: np.ndarray) -> dict:
    return {name: float(np.mean(codes == code)) for code, name in _CODE_NAMES.items()}


def _baseline_fractions(flags: np.ndarray) -> dict:
    # baselines never declare WD; a non-firing baseline counts as no declaration
    rate = float(np.mean(flags))
    return {"OOD": rate, "WD": 0.0, "UNKNOWN": 1.0 - rate}


def run_detection_sweep(config: ExperimentConfig, prepared: PreparedPolicy | None = None) -> SweepResult:
    """Verdict fractions of both certified detectors and both baselines per cell."""
    spec, det, seed, n = config.benchmark, config.detectors, config.seed, config.n
    if not _cell_list(config):
        raise ValueError("sweep grid is empty")
    prepared = prepare_policy(config) if prepared is None else prepared
    policy = prepared.policy
    c_train, se_train = expected_cost_oracle(
        spec, config.train_params, policy, config.oracle_samples, derive_seed(seed, _ORACLE)
    )
    holdout = sample_dataset(spec, config.train_params, det.baseline_holdout, derive_seed(seed, _HOLDOUT))
    holdout_logits = policy_scores(spec, holdout, policy)
    calibrations = {
        kind: calibrate_scores(kind, anomaly_scores(kind, holdout_logits), det.baseline_quantile)
        for kind in (MSP, MAX_LOGIT)
    }
    upper, lower = prepared.cert_upper.upper_bound, prepared.cert_lower.lower_bound

    def one_cell(item):
        index, (label, params) = item
        c_test, se_test = expected_cost_oracle(
            spec, params, policy, config.oracle_samples, derive_seed(seed, _ORACLE, index + 1)
        )
        data = _trial_datasets(spec, params, n, config.trials_per_cell, seed, _CELL, index)
        costs = batch_costs(spec, data, policy)[0].reshape(config.trials_per_cell, n)
        means = costs.mean(axis=1)
        logits = policy_scores(spec, data, policy)
        logits = logits.reshape(config.trials_per_cell, n, -1)
        ci = interval_codes(means, n, upper, lower, det.delta_o_prime, det.delta_w_prime)
        ht = hypothesis_codes(means, n, upper, lower, det.alpha_o, det.alpha_w)
        fractions = {"ci": _fractions(ci), "ht": _fractions(ht)}
        for name, kind in (("msp", MSP), ("maxlogit", MAX_LOGIT)):
            flags = anomaly_scores(kind, logits).mean(axis=1) > calibrations[kind].threshold
            fractions[name] = _baseline_fractions(flags)
        dco, dcw, _, _ = interval_indicators(means, n, upper, lower, det.delta_o_prime, det.delta_w_prime)
        _, _, p_ood, p_wd = hypothesis_indicators(means, n, upper, lower)
        indicators = {
            "test_cost": float(means.mean()),
            "delta_c_o": float(dco.mean()),
            "delta_c_w": float(dcw.mean()),
            "p_bound_ood": float(p_ood.mean()),
            "p_bound_wd": float(p_wd.mean()),
            "msp_score": float(anomaly_scores(MSP, logits).mean()),
            "maxlogit_score": float(anomaly_scores(MAX_LOGIT, logits).mean()),
        }
        return CellResult(
            index=index,
            label=label,
            params=params_to_dict(params),
            oracle_cost=c_test,
            oracle_se=se_test,
            gap=c_test - c_train,
            gap_se=math.hypot(se_test, se_train),
            trials=config.trials_per_cell,
            fractions=fractions,
            mean_indicators=indicators,
        )

    cells = _parallel_map(one_cell, enumerate(_cell_list(config)))
    return SweepResult(
        run_id=config.run_id,
        n=n,
        train_oracle_cost=c_train,
        train_oracle_se=se_train,
        certificate=prepared.cert_upper.to_dict(),
        detector_settings=asdict(det),
        baseline_thresholds={k: v.threshold for k, v in calibrations.items()},
        cells=cells,
    )


# --------------------------------------------------------------------------
# Rate tuning


@dataclass
class RateTuningReport:
    run_id: str
    rate_grid: list
    rows: list = field(default_factory=list)  # dicts: cell, label, gap, rate_o, rate_w, trials, OOD, WD, UNKNOWN
    monotone: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RateTuningReport":
        return cls(**data)

    def fraction(self, cell: int, rates, verdict: str) -> float:
        for row in self.rows:
            if row["cell"] == cell and (row["rate_o"], row["rate_w"]) == tuple(rates):
                return row[verdict]
        raise KeyError((cell, rates))


def _check_rates(rate_grid, det: DetectorSettings):
    for rate_o, rate_w in rate_grid:
        if not det.delta_o < rate_o < 1.0 or not det.delta_w < rate_w < 1.0:
            raise ValueError(
                f"rates ({rate_o}, {rate_w}) must exceed (delta_o, delta_w) = "
                f"({det.delta_o}, {det.delta_w}) and be below 1"
            )


def run_rate_tuning(
    config: ExperimentConfig, rate_grid=None, prepared: PreparedPolicy | None = None, sweep: SweepResult | None = None
) -> RateTuningReport:
    """CI-detector verdict fractions over permissible (FP, FN) rate pairs.

    ``delta_o`` / ``delta_w`` stay fixed; ``delta'`` absorbs the rest of each rate.
    The same test datasets are reused for every rate pair.
    """
    rate_grid = [tuple(float(v) for v in r) for r in (config.rate_grid if rate_grid is None else rate_grid)]
    det, spec, seed, n = config.detectors, config.benchmark, config.seed, config.n
    _check_rates(rate_grid, det)
    prepared = prepare_policy(config) if prepared is None else prepared
    upper, lower = prepared.cert_upper.upper_bound, prepared.cert_lower.lower_bound
    gaps = {c.index: c.gap for c in sweep.cells} if sweep is not None else {}

    def one_cell(item):
        index, (label, params) = item
        data = _trial_datasets(spec, params, n, config.trials_per_cell, seed, _CELL, index)
        means = batch_costs(spec, data, prepared.policy)[0].reshape(config.trials_per_cell, n).mean(axis=1)
        rows = []
        for rate_o, rate_w in rate_grid:
            codes = interval_codes(means, n, upper, lower, rate_o - det.delta_o, rate_w - det.delta_w)
            row = {
                "cell": index,
                "label": label,
                "gap": gaps.get(index),
                "rate_o": rate_o,
                "rate_w": rate_w,
                "trials": config.trials_per_cell,
            }
            row.update(_fractions(codes))
            rows.append(row)
        return rows

    rows = [row for cell_rows in _parallel_map(one_cell, enumerate(_cell_list(config))) for row in cell_rows]
    report = RateTuningReport(config.run_id, [list(r) for r in rate_grid], rows)
    report.monotone = _unknown_monotone(rows)
    if not report.monotone:
        raise AssertionError("UNKNOWN fraction increased when permissible rates increased")
    return report


def _unknown_monotone(rows) -> bool:
    by_cell = {}
    for row in rows:
        by_cell.setdefault(row["cell"], []).append(row)
    for cell_rows in by_cell.values():
        for a in cell_rows:
            for b in cell_rows:
                if b["rate_o"] >= a["rate_o"] and b["rate_w"] >= a["rate_w"] and b["UNKNOWN"] > a["UNKNOWN"]:
                    return False
    return True


# --------------------------------------------------------------------------
# Guarantee validation


@dataclass
class RateCheck:
    """An empirical rate against the bound it must respect."""

    name: str
    count: int
    trials: int
    bound: float

    @property
    def rate(self) -> float:
        return self.count / self.trials if self.trials else float("nan")

    @property
    def std_error(self) -> float:
        # standard error at the bound, the worst case the guarantee allows
        return binomial_se(self.bound, self.trials)

    @property
    def passed(self) -> bool:
        return self.trials > 0 and self.rate <= self.bound + 3.0 * self.std_error

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(rate=self.rate, std_error=self.std_error, passed=self.passed)
        return out


@dataclass
class ValidationReport:
    run_id: str
    trials: int
    checks: dict  # name -> RateCheck
    lower_bound_confidence: float = 0.9

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "trials": self.trials,
            "lower_bound_confidence": self.lower_bound_confidence,
            "checks": {k: v.to_dict() for k, v in self.checks.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ValidationReport":
        checks = {
            k: RateCheck(v["name"], v["count"], v["trials"], v["bound"]) for k, v in data["checks"].items()
        }
        return cls(data["run_id"], data["trials"], checks, data["lower_bound_confidence"])

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())


def _default_shift(params):
    if isinstance(params, QuadraticParams):
        return replace(params, spread=1.5 * params.spread + 0.1)
    if isinstance(params, NavParams):
        return replace(params, obstacle_count=params.obstacle_count + 2)
    raise TypeError(type(params).__name__)


def run_guarantee_validation(config: ExperimentConfig, min_trials: int = 2000) -> ValidationReport:
    """Repeat {sample S, train, certify, oracle C_D, sample test sets, detect}.

    Checks, each against its bound with a 3-standard-error band:

    * upper / lower certificate violations vs ``training.delta``;
    * CI false positives on training-distribution test sets vs ``delta_o + delta_o'``;
    * CI false negatives on a harder shift (trials whose oracle gap is positive)
      vs ``delta_w + delta_w'``;
    * invalid 0.9-confidence lower bounds on ``C_D' - C_D`` vs 0.1.
    """
    trials = config.trials_per_cell
    if trials < min_trials:
        raise ValueError(f"guarantee validation needs at least {min_trials} trials, got {trials}")
    spec, det, n, per = config.benchmark, config.detectors, config.n, config.datasets_per_trial
    shift = config.shift_params if config.shift_params is not None else _default_shift(config.train_params)
    delta = config.training.delta
    lb_conf = 0.9
    prior = build_prior(config, config.seed)

    def one_trial(t):
        seed = derive_seed(config.seed, _VALID, t)
        prepared = prepare_policy(config, seed=seed, prior=prior)
        policy = prepared.policy
        c_s = float(prepared.training_costs.mean())
        d2 = prepared.cert_upper.d2
        cov = build_certificate(c_s, d2, config.m, delta, policy.seed_tag)
        c_d, _ = expected_cost_oracle(spec, config.train_params, policy, config.oracle_samples, derive_seed(seed, _ORACLE))
        c_shift, _ = expected_cost_oracle(
            spec, shift, policy, config.oracle_samples, derive_seed(seed, _ORACLE, 1)
        )
        upper, lower = prepared.cert_upper.upper_bound, prepared.cert_lower.lower_bound
        same = _trial_datasets(spec, config.train_params, n, per, seed, _CELL, 0)
        same_means = batch_costs(spec, same, policy)[0].reshape(per, n).mean(axis=1)
        harder = _trial_datasets(spec, shift, n, per, seed, _CELL, 1)
        hard_means = batch_costs(spec, harder, policy)[0].reshape(per, n).mean(axis=1)
        fp = interval_codes(same_means, n, upper, lower, det.delta_o_prime, det.delta_w_prime)
        hard_codes = interval_codes(hard_means, n, upper, lower, det.delta_o_prime, det.delta_w_prime)
        gap = c_shift - c_d
        lb_upper = build_certificate(c_s, d2, config.m, det.delta_o, policy.seed_tag).upper_bound
        lb_dco, _, _, _ = interval_indicators(hard_means, n, lb_upper, lower, (1 - lb_conf) - det.delta_o, 0.5)
        return {
            "upper_violation": int(c_d > cov.upper_bound),
            "lower_violation": int(c_d < cov.lower_bound),
            "fp": int(np.sum(fp == OOD_CODE)),
            "fn": int(np.sum(hard_codes == WD_CODE)) if gap > 0 else 0,
            "fn_draws": per if gap > 0 else 0,
            "lb_invalid": int(np.sum(lb_dco > gap)),
        }

    outcomes = _parallel_map(one_trial, range(trials))
    total = lambda key: sum(o[key] for o in outcomes)  # noqa: E731
    checks = {
        "upper_bound": RateCheck("upper_bound", total("upper_violation"), trials, delta),
        "lower_bound": RateCheck("lower_bound", total("lower_violation"), trials, delta),
        "false_positive": RateCheck("false_positive", total("fp"), trials * per, det.fp_bound),
        "false_negative": RateCheck("false_negative", total("fn"), total("fn_draws"), det.fn_bound),
        "gap_lower_bound": RateCheck("gap_lower_bound", total("lb_invalid"), trials * per, 1 - lb_conf),
    }
    return ValidationReport(config.run_id, trials, checks, lb_conf)


@dataclass
class LowerBoundReport:
    """Validity of the CI lower bound on ``C_D' - C_D`` for one fixed policy."""

    confidence: float
    datasets: int
    cells: list  # dicts: label, gap, valid_fraction, quantile_bound, max_bound

    def to_dict(self) -> dict:
        return asdict(self)


def run_lower_bound_validation(
    config: ExperimentConfig,
    datasets: int = 100_000,
    confidence: float = 0.9,
    prepared: PreparedPolicy | None = None,
    oracle_samples: int | None = None,
) -> LowerBoundReport:
    """Fraction of test datasets whose lower bound ``Delta C_O`` does not exceed the true gap."""
    spec, det, n, seed = config.benchmark, config.detectors, config.n, config.seed
    delta_prime = (1.0 - confidence) - det.delta_o
    if delta_prime <= 0:
        raise ValueError("confidence leaves no room for delta_o'")
    prepared = prepare_policy(config) if prepared is None else prepared
    policy = prepared.policy
    samples = oracle_samples or config.oracle_samples
    c_train, _ = expected_cost_oracle(spec, config.train_params, policy, samples, derive_seed(seed, _ORACLE))

    def one_cell(item):
        index, (label, params) = item
        c_test, _ = expected_cost_oracle(spec, params, policy, samples, derive_seed(seed, _ORACLE, index + 1))
        gap = c_test - c_train
        data = sample_dataset(spec, params, datasets * n, derive_seed(seed, _VALID, index))
        means = batch_costs(spec, data, policy)[0].reshape(datasets, n).mean(axis=1)
        dco, _, _, _ = interval_indicators(means, n, prepared.cert_upper.upper_bound, 0.0, delta_prime, 0.5)
        return {
            "label": label,
            "gap": gap,
            "valid_fraction": float(np.mean(dco <= gap)),
            "quantile_bound": float(np.quantile(dco, confidence)),
            "max_bound": float(dco.max()),
        }

    cells = _parallel_map(one_cell, enumerate(_cell_list(config)))
    return LowerBoundReport(confidence, datasets, cells)


# --------------------------------------------------------------------------
# Persistence

_SWEEP_HEADER = ["cell", "label", "detector", "gap", "gap_se", "oracle_cost", "verdict", "fraction", "std_error", "trials"]
_LONG_HEADER = ["cell", "label", "detector", "gap", "verdict", "fraction", "std_error", "trials"]
_RATES_HEADER = ["cell", "label", "gap", "rate_o", "rate_w", "verdict", "fraction", "std_error", "trials"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _dump_json(path: Path, payload):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def persist_results(result, path) -> list:
    """Write a result's CSV/JSON files under directory `path`; returns written paths."""
    root = Path(path)
    written = []
    try:
        (root / "plotdata").mkdir(parents=True, exist_ok=True)
        if isinstance(result, SweepResult):
            rows, long_rows = [], []
            for c in result.cells:
                for det in DETECTORS:
                    for v in VERDICTS:
                        frac = c.fractions[det][v]
                        se = binomial_se(frac, c.trials)
                        rows.append([c.index, c.label, det, c.gap, c.gap_se, c.oracle_cost, v, frac, se, c.trials])
                        long_rows.append([c.index, c.label, det, c.gap, v, frac, se, c.trials])
            _write_csv(root / "sweep.csv", _SWEEP_HEADER, rows)
            _write_csv(root / "plotdata" / "sweep_long.csv", _LONG_HEADER, long_rows)
            _dump_json(root / "sweep.json", result.to_dict())
            written += [root / "sweep.csv", root / "plotdata" / "sweep_long.csv", root / "sweep.json"]
        elif isinstance(result, RateTuningReport):
            rows = [
                [r["cell"], r["label"], r["gap"], r["rate_o"], r["rate_w"], v, r[v], binomial_se(r[v], r["trials"]), r["trials"]]
                for r in result.rows
                for v in VERDICTS
            ]
            _write_csv(root / "rates.csv", _RATES_HEADER, rows)
            long_rows = [
                [row[0], row[1], f"ci@{row[3]}/{row[4]}", row[2], row[5], row[6], row[7], row[8]] for row in rows
            ]
            _write_csv(root / "plotdata" / "rates_long.csv", _LONG_HEADER, long_rows)
            _dump_json(root / "rates.json", result.to_dict())
            written += [root / "rates.csv", root / "plotdata" / "rates_long.csv", root / "rates.json"]
        elif isinstance(result, ValidationReport):
            _dump_json(root / "validation.json", result.to_dict())
            written.append(root / "validation.json")
        elif isinstance(result, LowerBoundReport):
            _dump_json(root / "lower_bound.json", result.to_dict())
            _write_csv(
                root / "plotdata" / "lower_bound.csv",
                ["label", "gap", "valid_fraction", "quantile_bound", "max_bound"],
                [[c["label"], c["gap"], c["valid_fraction"], c["quantile_bound"], c["max_bound"]] for c in result.cells],
            )
            written += [root / "lower_bound.json", root / "plotdata" / "lower_bound.csv"]
        else:
            raise TypeError(f"cannot persist {type(result).__name__}")
    except OSError as exc:
        raise OSError(f"failed writing results under {root}: {exc}") from exc
    return written


def load_results(path, kind: str = "sweep"):
    """Inverse of `persist_results` for ``kind`` in {"sweep", "rates", "validation"}."""
    root = Path(path)
    loaders = {
        "sweep": ("sweep.json", SweepResult.from_dict),
        "rates": ("rates.json", RateTuningReport.from_dict),
        "validation": ("validation.json", ValidationReport.from_dict),
    }
    name, loader = loaders[kind]
    return loader(json.loads((root / name).read_text()))
