"""Certified task-driven out-of-distribution detection for learned policies."""

from boundwatch.benchmarks import (
    PRIMITIVE_NAV,
    SMOOTH_QUADRATIC,
    BenchmarkSpec,
    EnvironmentDataset,
    NavParams,
    QuadraticParams,
    batch_costs,
    dataset_cost,
    expected_cost_oracle,
    nuisance_shift,
    rollout,
    sample_dataset,
)
from boundwatch.certificates import (
    Certificate,
    build_certificate,
    load_certificate,
    regularizer,
    save_certificate,
)
from boundwatch.detectors import (
    ConfidenceIntervalDetector,
    DetectionVerdict,
    HypothesisTestDetector,
    SoftmaxBaselineDetector,
    Verdict,
    detect_confidence_interval,
    detect_hypothesis,
)
from boundwatch.distributions import (
    DiagonalGaussian,
    WeightSample,
    project_variances,
    renyi2_divergence,
    renyi2_gradient,
    sample,
)
from boundwatch.harness import (
    ExperimentConfig,
    load_config,
    persist_results,
    run_detection_sweep,
    run_guarantee_validation,
    run_lower_bound_validation,
    run_rate_tuning,
)
from boundwatch.training import (
    PACBayesPolicy,
    TrainConfig,
    es_gradient,
    finalize_policy,
    reparam_gradient,
    train,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
