"""Certified OOD/WD detectors and softmax-score baselines.

The certified detectors compare the mean test cost of a fixed policy with the
PAC-Bayes bounds from its certificate:

* hypothesis testing -- Hoeffding upper bounds on the OOD and WD p-values;
* confidence intervals -- certified lower bounds on ``C_D' - C_D`` (OOD side)
  and ``C_D - C_D'`` (WD side), whose false positive / false negative rates are
  at most ``delta_o + delta_o'`` and ``delta_w + delta_w'``.

The vectorized ``*_codes`` helpers take arrays of mean test costs and are what the
harness uses; the scalar functions return a full `DetectionVerdict`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from boundwatch._validation import check_costs, check_open_unit, check_positive_int
from boundwatch.benchmarks import BenchmarkSpec, policy_scores, sample_dataset
from boundwatch.certificates import Certificate, certificate_id


class Verdict(str, Enum):
    OOD = "OOD"
    WD = "WD"
    UNKNOWN = "UNKNOWN"


MSP = "MSP"
MAX_LOGIT = "MaxLogit"

# integer codes used by the vectorized helpers
OOD_CODE, WD_CODE, UNKNOWN_CODE = 0, 1, 2
_CODE_TO_VERDICT = {OOD_CODE: Verdict.OOD, WD_CODE: Verdict.WD, UNKNOWN_CODE: Verdict.UNKNOWN}


class InconsistentVerdictError(AssertionError):
    """Both OOD and WD fired for the same test dataset."""


@dataclass(frozen=True)
class DetectionVerdict:
    verdict: Verdict
    method: str
    indicators: dict
    test_cost: float
    n: int
    certificate_id: str = ""
    rates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "method": self.method,
            "indicators": dict(self.indicators),
            "test_cost": self.test_cost,
            "n": self.n,
            "certificate_id": self.certificate_id,
            "rates": dict(self.rates),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def line(self) -> str:
        """``VERDICT p_ood=.. p_wd=.. dCo=.. dCw=..``; absent indicators print ``na``."""
        keys = (("p_ood", "p_bound_ood"), ("p_wd", "p_bound_wd"), ("dCo", "delta_c_o"), ("dCw", "delta_c_w"))
        parts = [self.verdict.value]
        for label, key in keys:
            value = self.indicators.get(key)
            parts.append(f"{label}={'na' if value is None else format(value, '.6g')}")
        return " ".join(parts)


def _codes(ood: np.ndarray, wd: np.ndarray) -> np.ndarray:
    if np.any(ood & wd):
        raise InconsistentVerdictError("detector declared both OOD and WD")
    return np.where(ood, OOD_CODE, np.where(wd, WD_CODE, UNKNOWN_CODE))


def _check_pair(cert_upper: Certificate, cert_lower: Certificate):
    if cert_upper.upper_bound < cert_lower.lower_bound:
        raise ValueError("upper bound certificate lies below the lower bound certificate")


def hypothesis_indicators(test_costs, n: int, upper: float, lower: float):
    """Exceedances and Hoeffding p-value bounds; arrays broadcast over `test_costs`."""
    costs = np.asarray(test_costs, dtype=float)
    tau_bar = np.maximum(costs - upper, 0.0)
    tau_under = np.maximum(lower - costs, 0.0)
    return tau_bar, tau_under, np.exp(-2.0 * n * tau_bar**2), np.exp(-2.0 * n * tau_under**2)


def hypothesis_codes(test_costs, n, upper, lower, alpha_o, alpha_w) -> np.ndarray:
    _, _, p_ood, p_wd = hypothesis_indicators(test_costs, n, upper, lower)
    return _codes(p_ood <= alpha_o, p_wd <= alpha_w)


def hoeffding_slack(n: int, delta_prime: float) -> float:
    """``sqrt(ln(1/delta') / (2n))``."""
    return math.sqrt(math.log(1.0 / delta_prime) / (2.0 * n))


def interval_indicators(test_costs, n, upper, lower, delta_o_prime, delta_w_prime):
    """``(delta_c_o, delta_c_w, gamma_o, gamma_w)`` broadcast over `test_costs`."""
    costs = np.asarray(test_costs, dtype=float)
    gamma_o = hoeffding_slack(n, delta_o_prime)
    gamma_w = hoeffding_slack(n, delta_w_prime)
    return costs - gamma_o - upper, lower - costs - gamma_w, gamma_o, gamma_w


def interval_codes(test_costs, n, upper, lower, delta_o_prime, delta_w_prime) -> np.ndarray:
    dco, dcw, _, _ = interval_indicators(test_costs, n, upper, lower, delta_o_prime, delta_w_prime)
    return _codes(dco > 0.0, dcw >= 0.0)


def detect_hypothesis(
    test_cost: float,
    n: int,
    cert: Certificate,
    alpha_o: float = 0.05,
    alpha_w: float = 0.05,
    cert_lower: Certificate | None = None,
) -> DetectionVerdict:
    """Declare OOD, WD or UNKNOWN from Hoeffding p-value bounds.

    `cert` supplies the upper bound; `cert_lower` (default: `cert`) the lower one.
    """
    test_cost = float(check_costs([test_cost], "test_cost")[0])
    n = check_positive_int(n, "n")
    alpha_o = check_open_unit(alpha_o, "alpha_o")
    alpha_w = check_open_unit(alpha_w, "alpha_w")
    cert_lower = cert if cert_lower is None else cert_lower
    _check_pair(cert, cert_lower)
    tau_bar, tau_under, p_ood, p_wd = (
        float(v) for v in hypothesis_indicators(test_cost, n, cert.upper_bound, cert_lower.lower_bound)
    )
    code = int(_codes(np.array(p_ood <= alpha_o), np.array(p_wd <= alpha_w)))
    return DetectionVerdict(
        _CODE_TO_VERDICT[code],
        "ht",
        {"tau_bar": tau_bar, "tau_underbar": tau_under, "p_bound_ood": p_ood, "p_bound_wd": p_wd},
        test_cost,
        n,
        certificate_id(cert),
        {"alpha_o": alpha_o, "alpha_w": alpha_w, "delta_o": cert.delta, "delta_w": cert_lower.delta},
    )


def detect_confidence_interval(
    test_cost: float,
    n: int,
    cert: Certificate,
    delta_o: float | None = None,
    delta_o_prime: float = 0.04,
    delta_w: float | None = None,
    delta_w_prime: float = 0.04,
    cert_lower: Certificate | None = None,
) -> DetectionVerdict:
    """Declare OOD, WD or UNKNOWN from certified bounds on the cost gap.

    ``delta_o`` / ``delta_w`` default to the certificates' own confidence levels
    and must match them when given.
    """
    test_cost = float(check_costs([test_cost], "test_cost")[0])
    n = check_positive_int(n, "n")
    cert_lower = cert if cert_lower is None else cert_lower
    _check_pair(cert, cert_lower)
    delta_o = cert.delta if delta_o is None else check_open_unit(delta_o, "delta_o")
    delta_w = cert_lower.delta if delta_w is None else check_open_unit(delta_w, "delta_w")
    if not math.isclose(delta_o, cert.delta) or not math.isclose(delta_w, cert_lower.delta):
        raise ValueError("delta_o / delta_w must match the certificates' delta")
    delta_o_prime = check_open_unit(delta_o_prime, "delta_o_prime")
    delta_w_prime = check_open_unit(delta_w_prime, "delta_w_prime")
    if delta_o + delta_o_prime >= 1.0 or delta_w + delta_w_prime >= 1.0:
        raise ValueError("delta + delta' must be below 1 on each side")
    dco, dcw, gamma_o, gamma_w = interval_indicators(
        test_cost, n, cert.upper_bound, cert_lower.lower_bound, delta_o_prime, delta_w_prime
    )
    dco, dcw = float(dco), float(dcw)
    code = int(_codes(np.array(dco > 0.0), np.array(dcw >= 0.0)))
    return DetectionVerdict(
        _CODE_TO_VERDICT[code],
        "ci",
        {"delta_c_o": dco, "delta_c_w": dcw, "gamma_o": gamma_o, "gamma_w": gamma_w},
        test_cost,
        n,
        certificate_id(cert),
        {
            "delta_o": delta_o,
            "delta_o_prime": delta_o_prime,
            "delta_w": delta_w,
            "delta_w_prime": delta_w_prime,
        },
    )


# --------------------------------------------------------------------------
# Softmax baselines


def anomaly_scores(score_kind: str, logits) -> np.ndarray:
    """Per-environment anomaly score, larger = more anomalous.

    MSP: ``1 - max softmax probability``; MaxLogit: ``-max logit``.
    """
    logits = np.asarray(logits, dtype=float)
    if score_kind == MSP:
        shifted = logits - logits.max(axis=-1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=-1, keepdims=True)
        return 1.0 - probs.max(axis=-1)
    if score_kind == MAX_LOGIT:
        return -logits.max(axis=-1)
    raise ValueError(f"score_kind must be {MSP!r} or {MAX_LOGIT!r}, got {score_kind!r}")


@dataclass(frozen=True)
class BaselineCalibration:
    score_kind: str
    threshold: float
    calibration_quantile: float


def calibrate_scores(score_kind: str, scores, quantile: float) -> BaselineCalibration:
    scores = np.asarray(scores, dtype=float)
    if not 0.0 < quantile <= 1.0:
        raise ValueError(f"quantile must lie in (0, 1], got {quantile}")
    return BaselineCalibration(score_kind, float(np.quantile(scores, quantile)), float(quantile))


def baseline_calibrate(
    score_kind: str,
    spec: BenchmarkSpec,
    training_params,
    policy_weights,
    holdout_size: int = 1000,
    quantile: float = 0.95,
    seed: int = 0,
) -> BaselineCalibration:
    """Threshold = empirical quantile of scores on a fresh training-distribution holdout."""
    holdout_size = check_positive_int(holdout_size, "holdout_size", minimum=100)
    holdout = sample_dataset(spec, training_params, holdout_size, seed)
    scores = anomaly_scores(score_kind, policy_scores(spec, holdout, policy_weights))
    return calibrate_scores(score_kind, scores, quantile)


def baseline_detect(calibration: BaselineCalibration, test_scores) -> bool:
    """OOD iff the mean anomaly score strictly exceeds the threshold."""
    scores = np.asarray(test_scores, dtype=float)
    if scores.size == 0:
        raise ValueError("test_scores must be non-empty")
    return bool(scores.mean() > calibration.threshold)


# --------------------------------------------------------------------------
# Estimator wrappers


def _as_dataset_costs(costs) -> np.ndarray:
    arr = check_costs(costs)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError("costs must have shape (n,) or (n_datasets, n)")
    return arr


class _CertifiedDetector(BaseEstimator):
    def fit(self, certificate: Certificate, certificate_lower: Certificate | None = None):
        """Store the certificate(s) the detector compares against."""
        lower = certificate if certificate_lower is None else certificate_lower
        _check_pair(certificate, lower)
        self.certificate_ = certificate
        self.certificate_lower_ = lower
        return self

    def predict(self, costs) -> np.ndarray:
        """Verdict strings, one per test dataset (row of `costs`)."""
        codes = self._codes(_as_dataset_costs(costs))
        return np.array([_CODE_TO_VERDICT[int(c)].value for c in codes])


class HypothesisTestDetector(_CertifiedDetector):
    """Hoeffding p-value detector; ``fit(certificate)`` then ``predict(costs)``."""

    def __init__(self, alpha_o=0.05, alpha_w=0.05):
        self.alpha_o = alpha_o
        self.alpha_w = alpha_w

    def decision_function(self, costs) -> np.ndarray:
        """Columns ``(p_bound_ood, p_bound_wd)`` per dataset."""
        check_is_fitted(self, "certificate_")
        arr = _as_dataset_costs(costs)
        _, _, p_ood, p_wd = hypothesis_indicators(
            arr.mean(axis=1), arr.shape[1], self.certificate_.upper_bound, self.certificate_lower_.lower_bound
        )
        return np.column_stack([p_ood, p_wd])

    def _codes(self, arr):
        check_is_fitted(self, "certificate_")
        check_open_unit(self.alpha_o, "alpha_o")
        check_open_unit(self.alpha_w, "alpha_w")
        return hypothesis_codes(
            arr.mean(axis=1),
            arr.shape[1],
            self.certificate_.upper_bound,
            self.certificate_lower_.lower_bound,
            self.alpha_o,
            self.alpha_w,
        )


class ConfidenceIntervalDetector(_CertifiedDetector):
    """Confidence-interval detector with guaranteed FP/FN rates."""

    def __init__(self, delta_o_prime=0.04, delta_w_prime=0.04):
        self.delta_o_prime = delta_o_prime
        self.delta_w_prime = delta_w_prime

    @property
    def max_false_positive_rate(self) -> float:
        check_is_fitted(self, "certificate_")
        return self.certificate_.delta + self.delta_o_prime

    @property
    def max_false_negative_rate(self) -> float:
        check_is_fitted(self, "certificate_")
        return self.certificate_lower_.delta + self.delta_w_prime

    def decision_function(self, costs) -> np.ndarray:
        """Columns ``(delta_c_o, delta_c_w)`` per dataset."""
        check_is_fitted(self, "certificate_")
        arr = _as_dataset_costs(costs)
        dco, dcw, _, _ = interval_indicators(
            arr.mean(axis=1),
            arr.shape[1],
            self.certificate_.upper_bound,
            self.certificate_lower_.lower_bound,
            self.delta_o_prime,
            self.delta_w_prime,
        )
        return np.column_stack([dco, dcw])

    def _codes(self, arr):
        check_is_fitted(self, "certificate_")
        check_open_unit(self.delta_o_prime, "delta_o_prime")
        check_open_unit(self.delta_w_prime, "delta_w_prime")
        if self.max_false_positive_rate >= 1.0 or self.max_false_negative_rate >= 1.0:
            raise ValueError("delta + delta' must be below 1 on each side")
        return interval_codes(
            arr.mean(axis=1),
            arr.shape[1],
            self.certificate_.upper_bound,
            self.certificate_lower_.lower_bound,
            self.delta_o_prime,
            self.delta_w_prime,
        )


class SoftmaxBaselineDetector(BaseEstimator):
    """MSP / MaxLogit detector; fit on held-out training-distribution logits."""

    def __init__(self, score_kind=MSP, quantile=0.95):
        self.score_kind = score_kind
        self.quantile = quantile

    def fit(self, logits, y=None):
        logits = np.asarray(logits, dtype=float)
        if logits.ndim != 2 or len(logits) < 100:
            raise ValueError("need at least 100 held-out score vectors of shape (N, K)")
        self.calibration_ = calibrate_scores(
            self.score_kind, anomaly_scores(self.score_kind, logits), self.quantile
        )
        return self

    def decision_function(self, logits) -> np.ndarray:
        """Mean anomaly score per dataset; `logits` is (n, K) or (n_datasets, n, K)."""
        check_is_fitted(self, "calibration_")
        logits = np.asarray(logits, dtype=float)
        if logits.ndim == 2:
            logits = logits[None]
        if logits.shape[1] == 0:
            raise ValueError("test datasets must be non-empty")
        return anomaly_scores(self.score_kind, logits).mean(axis=1)

    def predict(self, logits) -> np.ndarray:
        """Boolean OOD flag per dataset."""
        return self.decision_function(logits) > self.calibration_.threshold
