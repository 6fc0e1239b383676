import json

import numpy as np
import pandas as pd
import pytest

import bench
from bench import (
    REPORT_COLUMNS,
    ExperimentConfig,
    ExperimentReport,
    MethodResult,
    PRESET_ALIASES,
    PRESETS,
    emit_report,
    dm_comparison_configs,
    variant_grid_configs,
    horizon_configs,
    load_configs,
    run_experiment,
)
from errors import ConfigError, EmptyCalibrationError
from extensions import MultiSplitConfig
from quantile_forest import QuantileForestConfig
from synthetic import ScenarioSpec

TINY_FOREST = QuantileForestConfig(num_trees=10, min_leaf_size=5)


def tiny_config(**changes):
    settings = dict(
        scenario=ScenarioSpec(example=1, n=300),
        methods=("COPP", "SM", "IS-CI"),
        replications=2,
        test_points=200,
        forest=TINY_FOREST,
        known_behavior=True,
        name="tiny",
    )
    settings.update(changes)
    return ExperimentConfig(**settings)


class TestExperimentConfig:
    @pytest.mark.parametrize(
        "changes",
        [
            {"methods": ()},
            {"methods": ("COPP", "BOOTSTRAP")},
            {"replications": 0},
            {"test_points": 0},
            {"alpha": 1.5},
            {"threads": 0},
            {"master_seed": -1},
            {"train_fraction": 1.0},
            {"scenario": ScenarioSpec(example=2), "methods": ("DM-true",)},
        ],
    )
    def test_invalid(self, changes):
        with pytest.raises(ConfigError):
            tiny_config(**changes)

    def test_penalized_follows_dimension(self):
        assert not tiny_config().use_penalized
        assert tiny_config(scenario=ScenarioSpec(example=1, high_dim=True)).use_penalized
        assert tiny_config(penalized=True).use_penalized

    def test_from_dict(self):
        config = ExperimentConfig.from_dict(
            {
                "scenario": {"example": 2, "n": 500},
                "methods": "COPP, COPP-MS",
                "ms": {"repetitions": 5},
                "forest": {"num_trees": 20},
                "replications": 3,
            }
        )
        assert config.methods == ("COPP", "COPP-MS")
        assert config.ms == MultiSplitConfig(repetitions=5)
        assert config.forest.num_trees == 20
        assert config.scenario.example == 2

    @pytest.mark.parametrize(
        "payload",
        [
            {"methods": ["COPP"]},
            {"scenario": {"example": 7}},
            {"scenario": {"example": 1}, "ms": {"gamma": 2.0}},
            {"scenario": {"example": 1}, "surprise": True},
        ],
    )
    def test_from_dict_errors(self, payload):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(payload)

    def test_dict_survives_json(self, tmp_path):
        config = tiny_config()
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config.to_dict()))
        restored = ExperimentConfig.from_json(path)
        assert restored.to_dict() == config.to_dict()
        assert restored.forest == config.forest

    def test_from_json_rejects_lists(self, tmp_path):
        path = tmp_path / "configs.json"
        path.write_text(json.dumps([{"scenario": {"example": 1}}]))
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json(path)
        assert len(load_configs(path)) == 1

    def test_unreadable_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_configs(path)

    def test_file_values_beat_defaults(self, tmp_path):
        path = tmp_path / "configs.json"
        path.write_text(
            json.dumps([{"scenario": {"example": 1}, "threads": 4, "forest": {"min_leaf_size": 7}}, {"scenario": {"example": 3}}])
        )
        first, second = load_configs(path, {"threads": 2, "master_seed": 9, "forest": {"num_trees": 30}})
        assert first.threads == 4 and second.threads == 2
        assert first.master_seed == 9
        assert first.forest.num_trees == 30 and first.forest.min_leaf_size == 7


class TestRunExperiment:
    def test_report_shape(self):
        report = run_experiment(tiny_config(), progress=False)
        frame = report.to_frame()
        assert list(frame.columns) == REPORT_COLUMNS
        assert len(frame) == 6
        assert list(frame["replication"]) == [0, 0, 0, 1, 1, 1]
        assert not frame["failed"].any()
        assert frame["coverage"].between(0.0, 1.0).all()
        summary = report.summary()
        assert set(summary) == {"COPP", "SM", "IS-CI"}
        assert summary["COPP"]["replications"] == 2

    def test_seeded_and_schedule_free(self):
        serial = run_experiment(tiny_config(), progress=False).to_frame()
        again = run_experiment(tiny_config(), progress=False).to_frame()
        threaded = run_experiment(tiny_config(threads=2), progress=False).to_frame()
        pd.testing.assert_frame_equal(serial, again)
        pd.testing.assert_frame_equal(serial, threaded)

    def test_failures_are_recorded(self, monkeypatch):
        def empty(*args, **kwargs):
            raise EmptyCalibrationError("nothing matched", {"n_matched_cal": 0})

        monkeypatch.setattr(bench, "copp_fit", empty)
        report = run_experiment(tiny_config(methods=("COPP", "SM")), progress=False)
        assert [row.failed for row in report.rows("COPP")] == [True, True]
        assert not any(row.failed for row in report.rows("SM"))
        assert "EmptyCalibrationError" in report.failures[0].error
        assert report.summary()["COPP"]["failures"] == 2
        assert np.isnan(report.summary()["COPP"]["mean_coverage"])

    def test_sequential_scenario(self):
        config = tiny_config(
            scenario=ScenarioSpec(example=3, n=400),
            methods=("COPP", "COPP-MS", "DR-CI"),
            replications=1,
            ms=MultiSplitConfig(repetitions=2),
        )
        report = run_experiment(config, progress=False)
        assert not report.failures
        assert len(report.results) == 3


class TestEmitReport:
    def _report(self):
        config = tiny_config(methods=("COPP",), replications=2)
        return ExperimentReport(
            config,
            [
                MethodResult("COPP", 0, coverage=0.9, avg_length=3.0, n_matched_cal=120.0),
                MethodResult("COPP", 1, failed=True, error="EmptyCalibrationError: nothing matched"),
            ],
        )

    def test_writes_csv_and_json(self, tmp_path):
        paths = emit_report(self._report(), tmp_path)
        assert [path.name for path in paths] == ["tiny.csv", "tiny.json"]
        frame = pd.read_csv(tmp_path / "tiny.csv")
        assert list(frame.columns) == REPORT_COLUMNS
        payload = json.loads((tmp_path / "tiny.json").read_text())
        assert payload["summary"]["COPP"]["mean_coverage"] == 0.9
        assert payload["summary"]["COPP"]["failures"] == 1
        assert payload["failures"][0]["replication"] == 1
        assert payload["config"]["methods"] == ["COPP"]

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ConfigError):
            emit_report(self._report(), tmp_path, formats=("xml",))


class TestPresets:
    def test_grids(self):
        assert [c.scenario.target for c in dm_comparison_configs()] == ["stochastic", "deterministic"]
        grid = variant_grid_configs(replications=5)
        assert len(grid) == 4
        assert "IS-CI" in grid[0].methods and "IS-CI" not in grid[1].methods
        assert grid[1].ms.repetitions == 50
        assert [c.scenario.resolved_horizon for c in horizon_configs()] == [3, 4, 5]

    def test_overrides_reach_every_config(self):
        configs = horizon_configs(replications=2, threads=3, forest=TINY_FOREST)
        assert all(c.threads == 3 and c.forest == TINY_FOREST and c.replications == 2 for c in configs)

    def test_presets_keyed_by_figure(self):
        assert list(PRESETS) == ["figure2", "figure3", "figure4"]
        assert PRESETS["figure2"] is dm_comparison_configs
        assert PRESETS["figure4"] is horizon_configs
        assert set(PRESET_ALIASES) == set(PRESETS)
