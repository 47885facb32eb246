import csv
import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from boundwatch.benchmarks import BenchmarkSpec, QuadraticParams
from boundwatch.harness import (
    DETECTORS,
    VERDICTS,
    DetectorSettings,
    ExperimentConfig,
    PriorSettings,
    SweepResult,
    load_config,
    load_results,
    persist_results,
    prepare_policy,
    run_detection_sweep,
    run_guarantee_validation,
    run_lower_bound_validation,
    run_rate_tuning,
    worker_count,
)
from boundwatch.training import TrainConfig

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def small_config(**overrides):
    config = ExperimentConfig(
        benchmark=BenchmarkSpec.smooth_quadratic(),
        train_params=QuadraticParams(),
        test_param_grid=[QuadraticParams(spread=s) for s in (0.5, 0.75, 1.0)],
        m=200,
        n=10,
        trials_per_cell=200,
        oracle_samples=5000,
        prior=PriorSettings(variance=1.0),
        training=TrainConfig(iterations=20, learning_rate=0.2, delta=0.05),
        run_id="small",
    )
    return replace(config, **overrides)


@pytest.fixture(scope="module")
def sweep_and_prepared():
    config = small_config()
    prepared = prepare_policy(config)
    return config, prepared, run_detection_sweep(config, prepared)


class TestConfig:
    def test_round_trip(self):
        config = small_config()
        assert ExperimentConfig.from_dict(json.loads(json.dumps(config.to_dict()))) == config

    @pytest.mark.parametrize("name", ["nav_sweep.json", "quadratic_validation.json"])
    def test_shipped_configs_load(self, name):
        config = load_config(CONFIGS / name)
        assert config.to_dict() == json.loads((CONFIGS / name).read_text())

    def test_version_required(self):
        data = small_config().to_dict()
        del data["version"]
        with pytest.raises(ValueError, match="version"):
            ExperimentConfig.from_dict(data)

    def test_unknown_top_level_key(self):
        with pytest.raises(ValueError, match="unknown"):
            ExperimentConfig.from_dict({**small_config().to_dict(), "trials": 5})

    def test_unknown_nested_key(self):
        data = small_config().to_dict()
        data["detectors"]["alpha"] = 0.1
        with pytest.raises(ValueError, match="unknown"):
            ExperimentConfig.from_dict(data)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{")
        with pytest.raises(ValueError, match="JSON"):
            load_config(path)

    def test_detector_settings_validated(self):
        with pytest.raises(ValueError):
            DetectorSettings(delta_o=0.5, delta_o_prime=0.6)

    def test_worker_count(self, monkeypatch):
        monkeypatch.setenv("BOUNDWATCH_THREADS", "3")
        assert worker_count() == 3
        monkeypatch.setenv("BOUNDWATCH_THREADS", "many")
        with pytest.raises(ValueError):
            worker_count()


class TestSweep:
    def test_fractions_sum_to_one(self, sweep_and_prepared):
        _, _, sweep = sweep_and_prepared
        assert len(sweep.cells) == 4  # three grid cells and the nuisance cell
        for cell in sweep.cells:
            for det in DETECTORS:
                assert sum(cell.fractions[det].values()) == pytest.approx(1.0)
            assert cell.trials == 200 and cell.gap_se > 0

    def test_training_cell_has_no_false_ood(self, sweep_and_prepared):
        _, _, sweep = sweep_and_prepared
        assert sweep.cells[0].fraction("ci", "OOD") <= 0.05 + 3 * math.sqrt(0.05 * 0.95 / 200)

    def test_indicator_follows_gap(self, sweep_and_prepared):
        _, _, sweep = sweep_and_prepared
        grid = sweep.cells[:3]
        gaps = [c.gap for c in grid]
        assert gaps == sorted(gaps) and gaps[0] < gaps[-1]
        dco = [c.mean_indicators["delta_c_o"] for c in grid]
        assert all(b > a for a, b in zip(dco, dco[1:]))

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            run_detection_sweep(small_config(test_param_grid=(), include_nuisance_cell=False))

    def test_thread_count_does_not_change_output(self, tmp_path, monkeypatch):
        config = small_config(trials_per_cell=50, oracle_samples=2000)
        outputs = []
        for threads in ("1", "4"):
            monkeypatch.setenv("BOUNDWATCH_THREADS", threads)
            persist_results(run_detection_sweep(config), tmp_path / threads)
            outputs.append((tmp_path / threads / "sweep.csv").read_bytes())
        assert outputs[0] == outputs[1]


class TestPersistence:
    def test_round_trip(self, sweep_and_prepared, tmp_path):
        _, _, sweep = sweep_and_prepared
        persist_results(sweep, tmp_path)
        assert load_results(tmp_path, "sweep") == sweep

    def test_row_count(self, sweep_and_prepared, tmp_path):
        _, _, sweep = sweep_and_prepared
        persist_results(sweep, tmp_path)
        with open(tmp_path / "sweep.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(sweep.cells) * len(DETECTORS) * len(VERDICTS)
        assert {"gap", "fraction", "std_error", "trials"} <= set(rows[0])
        long_rows = (tmp_path / "plotdata" / "sweep_long.csv").read_text().splitlines()
        assert len(long_rows) == len(rows) + 1

    def test_empty_sweep_header_only(self, tmp_path):
        empty = SweepResult("empty", 10, 0.5, 0.01, {}, {}, {}, [])
        persist_results(empty, tmp_path)
        assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 1

    def test_unwritable_path_reports_location(self, tmp_path, sweep_and_prepared):
        _, _, sweep = sweep_and_prepared
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError, match=str(blocker)):
            persist_results(sweep, blocker / "sub")


class TestRateTuning:
    def test_unknown_shrinks_and_asymmetry_skews(self, sweep_and_prepared, tmp_path):
        config, prepared, sweep = sweep_and_prepared
        grid = [(0.05, 0.05), (0.40, 0.40), (0.90, 0.10)]
        report = run_rate_tuning(config, grid, prepared=prepared, sweep=sweep)
        assert report.monotone
        for cell in range(4):
            assert report.fraction(cell, (0.40, 0.40), "UNKNOWN") <= report.fraction(cell, (0.05, 0.05), "UNKNOWN")
            assert report.fraction(cell, (0.90, 0.10), "OOD") >= report.fraction(cell, (0.05, 0.05), "OOD")
        persist_results(report, tmp_path)
        assert load_results(tmp_path, "rates") == report
        rows = (tmp_path / "rates.csv").read_text().splitlines()
        assert len(rows) == 1 + 4 * len(grid) * len(VERDICTS)

    @pytest.mark.parametrize("rates", [(1.0, 0.05), (0.05, 1.2), (0.005, 0.05)])
    def test_invalid_rates(self, rates):
        with pytest.raises(ValueError):
            run_rate_tuning(small_config(), [rates])


class TestValidation:
    def test_needs_enough_trials(self):
        with pytest.raises(ValueError, match="2000"):
            run_guarantee_validation(small_config(trials_per_cell=100))

    def test_loose_delta_still_holds(self, tmp_path):
        config = small_config(
            trials_per_cell=40,
            datasets_per_trial=3,
            oracle_samples=2000,
            training=TrainConfig(iterations=5, learning_rate=0.2, delta=0.5),
        )
        report = run_guarantee_validation(config, min_trials=40)
        upper = report.checks["upper_bound"]
        assert upper.bound == 0.5 and upper.trials == 40
        assert upper.rate <= 0.5 + 3 * math.sqrt(0.25 / 40)
        assert report.passed
        persist_results(report, tmp_path)
        assert load_results(tmp_path, "validation").to_dict() == report.to_dict()

    def test_lower_bound_validation(self):
        config = small_config(test_param_grid=[QuadraticParams(spread=0.8)], include_nuisance_cell=False)
        report = run_lower_bound_validation(config, datasets=2000, oracle_samples=5000)
        cell = report.cells[0]
        assert cell["gap"] > 0 and cell["valid_fraction"] >= 0.9
        assert cell["quantile_bound"] <= cell["max_bound"]
