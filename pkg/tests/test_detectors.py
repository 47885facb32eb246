import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from boundwatch.benchmarks import BenchmarkSpec, NavParams, nuisance_shift, policy_scores, sample_dataset
from boundwatch.certificates import build_certificate, certificate_id
from boundwatch.detectors import (
    MAX_LOGIT,
    MSP,
    ConfidenceIntervalDetector,
    HypothesisTestDetector,
    InconsistentVerdictError,
    SoftmaxBaselineDetector,
    Verdict,
    _codes,
    anomaly_scores,
    baseline_calibrate,
    baseline_detect,
    calibrate_scores,
    detect_confidence_interval,
    detect_hypothesis,
    hoeffding_slack,
    hypothesis_codes,
    interval_codes,
)
from boundwatch.training import fit_prior_mean


def cert_with(upper, lower, delta=0.01):
    return dataclasses.replace(build_certificate(0.5, 0.0, 100, delta), upper_bound=upper, lower_bound=lower)


class TestHypothesis:
    def test_vacuous_when_below_upper(self):
        v = detect_hypothesis(0.3, 10, cert_with(0.4, 0.2))
        assert v.indicators["tau_bar"] == 0.0 and v.indicators["p_bound_ood"] == 1.0
        assert v.verdict is not Verdict.OOD

    def test_ood_example(self):
        v = detect_hypothesis(0.6, 10, cert_with(0.1, 0.0), alpha_o=0.05)
        assert v.indicators["tau_bar"] == pytest.approx(0.5)
        assert v.indicators["p_bound_ood"] == pytest.approx(math.exp(-5), rel=1e-12)
        assert v.indicators["p_bound_ood"] == pytest.approx(0.00674, abs=1e-5)
        assert v.verdict is Verdict.OOD

    def test_wd_example(self):
        v = detect_hypothesis(0.0, 10, cert_with(0.9, 0.4), alpha_w=0.05)
        assert v.indicators["tau_underbar"] == pytest.approx(0.4)
        assert v.indicators["p_bound_wd"] == pytest.approx(0.0408, abs=1e-4)
        assert v.verdict is Verdict.WD

    def test_unknown_inside_bounds(self):
        assert detect_hypothesis(0.5, 10, cert_with(0.6, 0.4)).verdict is Verdict.UNKNOWN

    def test_separate_lower_certificate(self):
        upper = cert_with(0.9, 0.1)
        lower = cert_with(0.9, 0.5)
        assert detect_hypothesis(0.0, 10, upper, cert_lower=lower).verdict is Verdict.WD
        assert detect_hypothesis(0.0, 10, upper).verdict is Verdict.UNKNOWN

    @pytest.mark.parametrize("alpha", [0.0, 1.0])
    def test_alpha_range(self, alpha):
        with pytest.raises(ValueError):
            detect_hypothesis(0.5, 10, cert_with(0.6, 0.4), alpha_o=alpha)


class TestConfidenceInterval:
    def test_gamma_example(self):
        assert hoeffding_slack(10, 0.05) == pytest.approx(math.sqrt(math.log(20) / 20), rel=1e-14)
        assert hoeffding_slack(10, 0.05) == pytest.approx(0.38704, abs=5e-5)

    def test_ood_example(self):
        v = detect_confidence_interval(0.9, 10, cert_with(0.1, 0.0, delta=0.01), delta_o_prime=0.05)
        assert v.indicators["delta_c_o"] == pytest.approx(0.9 - 0.1 - hoeffding_slack(10, 0.05))
        assert v.indicators["delta_c_o"] == pytest.approx(0.41296, abs=5e-5)
        assert v.verdict is Verdict.OOD

    def test_training_cost_never_ood(self):
        cert = build_certificate(0.3, 0.5, 200, 0.01)
        v = detect_confidence_interval(cert.empirical_cost, 10, cert)
        gamma = hoeffding_slack(10, 0.04)
        assert v.indicators["delta_c_o"] == pytest.approx(-gamma - math.sqrt(cert.regularizer))
        assert v.verdict is not Verdict.OOD

    def test_wd_on_boundary(self):
        # delta_c_w >= 0 is inclusive
        gamma = hoeffding_slack(10, 0.25)
        v = detect_confidence_interval(0.0, 10, cert_with(0.9, gamma), delta_w_prime=0.25)
        assert v.indicators["delta_c_w"] == 0.0
        assert v.verdict is Verdict.WD

    def test_delta_sum_below_one(self):
        with pytest.raises(ValueError):
            detect_confidence_interval(0.5, 10, cert_with(0.6, 0.4, delta=0.5), delta_o_prime=0.5)

    def test_delta_must_match_certificate(self):
        with pytest.raises(ValueError, match="match"):
            detect_confidence_interval(0.5, 10, cert_with(0.6, 0.4, delta=0.01), delta_o=0.02)

    def test_rejects_cost_outside_unit_interval(self):
        with pytest.raises(ValueError):
            detect_confidence_interval(1.2, 10, cert_with(0.6, 0.4))


class TestConsistency:
    @given(
        st.floats(0, 1),
        st.integers(1, 10_000),
        st.floats(-1, 2),
        st.floats(0, 2),
        st.floats(1e-6, 0.999999),
        st.floats(1e-6, 0.999999),
    )
    def test_never_both(self, cost, n, lower, width, a, b):
        upper = lower + width
        hypothesis_codes(np.array([cost]), n, upper, lower, a, b)
        interval_codes(np.array([cost]), n, upper, lower, a, b)

    def test_guard_raises(self):
        with pytest.raises(InconsistentVerdictError):
            _codes(np.array([True]), np.array([True]))

    def test_verdict_monotone_in_cost(self):
        costs = np.linspace(0, 1, 1001)
        order = {1: 0, 2: 1, 0: 2}  # WD < UNKNOWN < OOD
        for codes in (
            interval_codes(costs, 10, 0.45, 0.35, 0.04, 0.04),
            hypothesis_codes(costs, 10, 0.45, 0.35, 0.05, 0.05),
        ):
            ranks = np.array([order[c] for c in codes])
            assert np.all(np.diff(ranks) >= 0)


class TestSerialization:
    def test_line_and_json(self):
        cert = cert_with(0.1, 0.0)
        v = detect_hypothesis(0.6, 10, cert)
        assert v.line().startswith("OOD p_ood=0.00673795 p_wd=1 dCo=na dCw=na")
        record = json.loads(v.to_json())
        assert record["verdict"] == "OOD"
        assert record["certificate_id"] == certificate_id(cert)
        assert record["rates"]["alpha_o"] == 0.05
        assert set(record["indicators"]) == {"tau_bar", "tau_underbar", "p_bound_ood", "p_bound_wd"}

    def test_ci_line(self):
        line = detect_confidence_interval(0.5, 10, cert_with(0.6, 0.4)).line()
        assert line.startswith("UNKNOWN p_ood=na p_wd=na dCo=")


@pytest.fixture(scope="module")
def nav_setup():
    spec = BenchmarkSpec.primitive_nav()
    policy = fit_prior_mean(spec, sample_dataset(spec, NavParams(), 3000, 1))
    return spec, policy


class TestBaselines:
    def test_score_orientation(self):
        logits = np.array([[10.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
        msp = anomaly_scores(MSP, logits)
        assert msp[0] < msp[1] and msp[1] == pytest.approx(2 / 3)
        np.testing.assert_array_equal(anomaly_scores(MAX_LOGIT, logits), [-10.0, -1.0])
        with pytest.raises(ValueError):
            anomaly_scores("energy", logits)

    def test_quantile_one_is_max(self, nav_setup):
        spec, policy = nav_setup
        cal = baseline_calibrate(MSP, spec, NavParams(), policy, 1000, 1.0, seed=2)
        holdout = sample_dataset(spec, NavParams(), 1000, 2)
        assert cal.threshold == anomaly_scores(MSP, policy_scores(spec, holdout, policy)).max()
        fresh = anomaly_scores(MSP, policy_scores(spec, sample_dataset(spec, NavParams(), 1000, 3), policy))
        assert np.mean(fresh > cal.threshold) < 0.01

    def test_median_threshold(self, nav_setup):
        spec, policy = nav_setup
        cal = baseline_calibrate(MAX_LOGIT, spec, NavParams(), policy, 5000, 0.5, seed=4)
        fresh = anomaly_scores(MAX_LOGIT, policy_scores(spec, sample_dataset(spec, NavParams(), 1000, 5), policy))
        assert abs(np.mean(fresh > cal.threshold) - 0.5) <= 0.05

    def test_holdout_size_floor(self, nav_setup):
        spec, policy = nav_setup
        with pytest.raises(ValueError):
            baseline_calibrate(MSP, spec, NavParams(), policy, 99)

    @pytest.mark.parametrize("kind", [MSP, MAX_LOGIT])
    def test_nuisance_scores_dominate(self, nav_setup, kind):
        from scipy.stats import mannwhitneyu

        spec, policy = nav_setup
        base = anomaly_scores(kind, policy_scores(spec, sample_dataset(spec, NavParams(), 1000, 6), policy))
        moved = anomaly_scores(
            kind, policy_scores(spec, sample_dataset(spec, nuisance_shift(NavParams()), 1000, 7), policy)
        )
        assert mannwhitneyu(moved, base, alternative="greater").pvalue < 1e-6

    def test_detect_rule(self):
        cal = calibrate_scores(MSP, [0.1, 0.2, 0.3], 0.5)
        assert cal.threshold == pytest.approx(0.2)
        assert baseline_detect(cal, [0.0, 0.1]) is False
        assert baseline_detect(cal, [0.5, 0.6]) is True
        assert baseline_detect(cal, [0.1, 0.3]) is False  # mean equals threshold
        with pytest.raises(ValueError):
            baseline_detect(cal, [])


class TestEstimators:
    def test_hypothesis_detector(self):
        det = HypothesisTestDetector(alpha_o=0.05, alpha_w=0.05).fit(cert_with(0.1, 0.0))
        costs = np.array([[0.6] * 10, [0.05] * 10])
        np.testing.assert_array_equal(det.predict(costs), ["OOD", "UNKNOWN"])
        scores = det.decision_function(costs)
        assert scores.shape == (2, 2) and scores[0, 0] == pytest.approx(math.exp(-5))
        assert clone(det).get_params() == {"alpha_o": 0.05, "alpha_w": 0.05}

    def test_interval_detector_rates(self):
        det = ConfidenceIntervalDetector(0.04, 0.04).fit(cert_with(0.9, 0.4, delta=0.01))
        assert det.max_false_positive_rate == pytest.approx(0.05)
        assert det.max_false_negative_rate == pytest.approx(0.05)
        assert det.predict(np.zeros(10)).tolist() == ["UNKNOWN"]
        det = ConfidenceIntervalDetector(0.04, 0.04).fit(cert_with(0.9, 0.9, delta=0.01))
        assert det.predict(np.zeros(10)).tolist() == ["WD"]

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            ConfidenceIntervalDetector().predict(np.zeros(10))

    def test_softmax_baseline(self, nav_setup):
        spec, policy = nav_setup
        train_logits = policy_scores(spec, sample_dataset(spec, NavParams(), 2000, 8), policy)
        det = SoftmaxBaselineDetector(MSP, 0.95).fit(train_logits)
        shifted = policy_scores(spec, sample_dataset(spec, nuisance_shift(NavParams()), 200, 9), policy)
        flags = det.predict(shifted.reshape(20, 10, -1))
        assert flags.shape == (20,) and flags.mean() > 0.5
        with pytest.raises(ValueError):
            SoftmaxBaselineDetector().fit(train_logits[:50])
