import numpy as np
import pytest

from conformal import copp_fit
from core_types import Policy, SplitSpec, TrajectoryDataset
from errors import DegenerateLabelsError, EmptyCalibrationError, InvalidDatasetError, InvalidInputError
from extensions import MultiSplitBatch, MultiSplitConfig, copp_is_fit
import sequential
from sequential import (
    fit_match_weight_model,
    fit_stage_policies,
    per_stage_copp,
    prepare_trajectory_matching,
    sample_trajectory_pseudo_actions,
    sequential_copp_fit,
    sequential_copp_is_fit,
    sequential_copp_is_predict,
    sequential_copp_predict,
    sequential_copp_ms_fit,
    sequential_subsampling_method,
)
from synthetic import Example2, Example3


def as_one_stage(data):
    return TrajectoryDataset((data.contexts,), data.actions.reshape(-1, 1), data.outcomes, data.num_actions)


class TestStagePolicies:
    def test_one_model_per_stage(self, example3_data):
        behaviors = fit_stage_policies(example3_data)
        assert behaviors.horizon == 3
        probs = behaviors.probabilities(example3_data, 2)
        assert probs.shape == (example3_data.n, 2)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_degenerate_stage_is_named(self):
        rng = np.random.default_rng(0)
        n = 50
        actions = np.column_stack([rng.integers(0, 2, n), np.zeros(n, dtype=int)])
        data = TrajectoryDataset((rng.random((n, 1)), rng.random((n, 1))), actions, rng.random(n))
        with pytest.raises(DegenerateLabelsError) as raised:
            fit_stage_policies(data)
        assert raised.value.stage == 2

    def test_pseudo_draws_have_trajectory_shape(self, example3, example3_data):
        behaviors = fit_stage_policies(example3_data)
        sampled = sample_trajectory_pseudo_actions(
            behaviors, example3.target_policies, example3_data, np.random.default_rng(0)
        )
        assert sampled.shape == (example3_data.n, 3)
        assert set(np.unique(sampled)) <= {0, 1}


class TestMatchWeights:
    def test_constant_when_labels_degenerate(self):
        model = fit_match_weight_model(np.zeros((10, 1)), np.ones(10, dtype=bool), np.random.default_rng(0))
        np.testing.assert_array_equal(model.weights(np.zeros((3, 1))), 1.0)

    def test_no_match_is_floored(self):
        model = fit_match_weight_model(np.zeros((10, 1)), np.zeros(10, dtype=bool), np.random.default_rng(0), floor=0.01)
        np.testing.assert_allclose(model.weights(np.zeros((2, 1))), 100.0)

    def test_classifier_weights_exceed_one(self, rng):
        states = rng.standard_normal((400, 1))
        matched = rng.random(400) < 0.3
        model = fit_match_weight_model(states, matched, rng)
        assert np.all(model.weights(states[:20]) >= 1.0)

    def test_horizon_one_uses_exact_weight(self, example1, example1_data):
        data = as_one_stage(example1_data)
        state = prepare_trajectory_matching(
            data, [example1.target_policy], [example1.behavior_policy], SplitSpec(seed=1), np.random.default_rng(0)
        )
        contexts = example1_data.contexts[:10]
        np.testing.assert_allclose(state.match_weights.weights(contexts), state.pseudo[0].weights(contexts))


class TestSequentialCopp:
    def test_one_stage_reduces_to_copp(self, example1, example1_data, small_forest):
        kwargs = dict(split=SplitSpec(seed=5), alpha=0.1, forest_config=small_forest)
        bandit = copp_fit(
            example1_data, example1.target_policy, example1.behavior_policy, rng=np.random.default_rng(8), **kwargs
        )
        trajectory = sequential_copp_fit(
            as_one_stage(example1_data),
            [example1.target_policy],
            [example1.behavior_policy],
            rng=np.random.default_rng(8),
            **kwargs,
        )
        contexts = np.random.default_rng(2).random((25, 4))
        first, second = bandit.predict_intervals(contexts), trajectory.predict_intervals(contexts)
        np.testing.assert_array_equal(first.lower, second.lower)
        np.testing.assert_array_equal(first.upper, second.upper)
        assert bandit.diagnostics["n_matched_cal"] == trajectory.diagnostics["n_matched_cal"]

    def test_example2_diagnostics(self, example2, example2_data, small_forest):
        model = sequential_copp_fit(
            example2_data, example2.target_policies, rng=np.random.default_rng(0), forest_config=small_forest
        )
        diagnostics = model.diagnostics
        assert len(diagnostics["stage_match_rates"]) == 2
        assert all(0.0 < rate < 1.0 for rate in diagnostics["stage_match_rates"])
        assert diagnostics["n_cal"] == 150
        assert 0 < diagnostics["n_matched_cal"] <= 150
        x1, outcomes = example2.sample_test_points(500, np.random.default_rng(1))
        batch = model.predict_intervals(x1)
        assert len(batch) == 500
        assert batch.covers(outcomes).mean() > 0.5

    def test_importance_sampling_uses_all_calibration(self, example2, example2_data, small_forest):
        model = sequential_copp_is_fit(
            example2_data,
            example2.target_policies,
            behaviors=example2.behavior_policies,
            rng=np.random.default_rng(0),
            forest_config=small_forest,
        )
        assert len(model.cal_weights) == model.diagnostics["n_cal"]
        assert np.all(model.cal_weights > 0)

    def test_target_count_checked(self, example2, example2_data):
        with pytest.raises(InvalidInputError):
            sequential_copp_fit(example2_data, example2.target_policies[:1])
        with pytest.raises(InvalidInputError):
            sequential_copp_fit(example2_data, example2.target_policies, weight_rule="neither")

    def test_no_full_match_raises(self):
        rng = np.random.default_rng(0)
        n = 40
        actions = np.zeros((n, 2), dtype=int)
        data = TrajectoryDataset((rng.random((n, 1)), rng.random((n, 1))), actions, rng.random(n))
        always_one = Policy.deterministic(lambda h: np.ones(h.shape[0], dtype=int), 2)
        with pytest.raises(EmptyCalibrationError) as raised:
            sequential_copp_fit(data, [always_one, always_one], [Policy.uniform(2), Policy.uniform(2)], rng=rng)
        assert raised.value.diagnostics["stage_match_rates"] == [0.0, 0.0]

    def test_subsampling_has_unit_weights(self, example2, example2_data, small_forest):
        model = sequential_subsampling_method(
            example2_data, example2.target_policies, rng=np.random.default_rng(0), forest_config=small_forest
        )
        np.testing.assert_array_equal(model.cal_weights, 1.0)

    def test_multi_split(self, example3, example3_data, small_forest):
        model = sequential_copp_ms_fit(
            example3_data,
            example3.target_policies,
            example3.behavior_policies,
            MultiSplitConfig(repetitions=3),
            rng=np.random.default_rng(0),
            forest_config=small_forest,
        )
        x1, _ = example3.sample_test_points(50, np.random.default_rng(1))
        batch = model.predict_intervals(x1)
        assert isinstance(batch, MultiSplitBatch) and len(batch) == 50


class TestPerStage:
    def test_one_model_per_stage(self, example3, example3_data, small_forest):
        models = per_stage_copp(
            example3_data,
            example3.target_policies,
            example3.behavior_policies,
            rng=np.random.default_rng(0),
            forest_config=small_forest,
        )
        assert len(models) == 3
        x1 = np.zeros((4, 1))
        for model in models:
            assert len(model.predict_intervals(x1)) == 4

    def test_needs_stage_rewards(self, example2, example2_data):
        with pytest.raises(InvalidDatasetError):
            per_stage_copp(example2_data, example2.target_policies)


def test_single_point_helpers(example2, example2_data, small_forest):
    targets, behaviors = example2.target_policies, example2.behavior_policies
    x1 = np.array([0.3])
    model = sequential_copp_fit(example2_data, targets, behaviors, SplitSpec(seed=1), 0.1, np.random.default_rng(2), small_forest)
    direct = sequential_copp_predict(
        example2_data, targets, behaviors, SplitSpec(seed=1), 0.1, np.random.default_rng(2), x1, forest_config=small_forest
    )
    assert direct == model(x1)
    is_model = sequential_copp_is_fit(
        example2_data, targets, behaviors=behaviors, rng=np.random.default_rng(3), forest_config=small_forest
    )
    is_direct = sequential_copp_is_predict(
        example2_data, targets, x1, behaviors=behaviors, rng=np.random.default_rng(3), forest_config=small_forest
    )
    assert is_direct == is_model(x1)


class TestReductions:
    def test_horizon_one_importance_sampling_is_copp_is(self, example1, example1_data, small_forest):
        kwargs = dict(split=SplitSpec(seed=6), alpha=0.1, forest_config=small_forest)
        bandit = copp_is_fit(
            example1_data, example1.target_policy, example1.behavior_policy, rng=np.random.default_rng(11), **kwargs
        )
        trajectory = sequential_copp_is_fit(
            as_one_stage(example1_data),
            [example1.target_policy],
            behaviors=[example1.behavior_policy],
            rng=np.random.default_rng(11),
            **kwargs,
        )
        np.testing.assert_array_equal(bandit.cal_weights, trajectory.cal_weights)
        contexts = np.random.default_rng(2).random((25, 4))
        first, second = bandit.predict_intervals(contexts), trajectory.predict_intervals(contexts)
        np.testing.assert_array_equal(first.lower, second.lower)
        np.testing.assert_array_equal(first.upper, second.upper)

    @pytest.mark.parametrize("horizon", [2, 3])
    def test_indicator_weights_reproduce_sequential_copp(self, horizon, small_forest):
        scenario = Example2() if horizon == 2 else Example3(horizon)
        data = scenario.generate(600, np.random.default_rng(horizon)).data
        kwargs = dict(split=SplitSpec(seed=4), alpha=0.1, forest_config=small_forest)
        plain = sequential_copp_fit(data, scenario.target_policies, rng=np.random.default_rng(5), **kwargs)
        indicator = sequential_copp_is_fit(
            data, scenario.target_policies, rng=np.random.default_rng(5), weight_rule="indicator", **kwargs
        )
        x1, _ = scenario.sample_test_points(40, np.random.default_rng(6))
        first, second = plain.predict_intervals(x1), indicator.predict_intervals(x1)
        np.testing.assert_array_equal(first.lower, second.lower)
        np.testing.assert_array_equal(first.upper, second.upper)
        assert np.count_nonzero(indicator.cal_weights) == plain.diagnostics["n_matched_cal"]


def test_subsampling_fits_no_behavior_or_match_model(example2, example2_data, small_forest, monkeypatch):
    def refuse(*args, **kwargs):
        raise AssertionError("subsampling must not fit behavior or match-weight models")

    monkeypatch.setattr(sequential, "_resolve_stage_behaviors", refuse)
    monkeypatch.setattr(sequential, "fit_match_weight_model", refuse)
    model = sequential_subsampling_method(
        example2_data, example2.target_policies, rng=np.random.default_rng(0), forest_config=small_forest
    )
    assert model.diagnostics["n_matched_cal"] > 0
