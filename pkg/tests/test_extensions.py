import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conformal import copp_fit
from core_types import IntervalBatch, PredictionSet, SplitSpec
from errors import AggregateFailureError, EmptyCalibrationError, InvalidInputError
from extensions import (
    MultiSplitBatch,
    MultiSplitConfig,
    MultiSplitModel,
    aggregate_interval_batch,
    aggregate_intervals,
    copp_is_fit,
    copp_is_predict,
    copp_ms_fit,
    copp_ms_predict,
    copp_p_value,
    majority_threshold,
)


class TestAggregation:
    @pytest.mark.parametrize("repetitions, gamma, expected", [(3, 0.5, 2), (100, 0.5, 50), (1, 0.5, 1), (4, 0.25, 3)])
    def test_majority_threshold(self, repetitions, gamma, expected):
        assert majority_threshold(repetitions, gamma) == expected

    def test_worked_example(self):
        result = aggregate_intervals([(0.0, 2.0), (1.0, 3.0), (10.0, 11.0)], 0.5)
        assert result.pieces == ((1.0, 2.0),)

    def test_single_interval(self):
        assert aggregate_intervals([PredictionSet.interval(-1.0, 4.0)], 0.9).pieces == ((-1.0, 4.0),)

    def test_identical_intervals(self):
        assert aggregate_intervals([(2.0, 5.0)] * 7, 0.5).pieces == ((2.0, 5.0),)

    def test_touching_intervals_stay_connected(self):
        result = aggregate_intervals([(0.0, 1.0), (1.0, 2.0), (0.0, 2.0)], 0.5)
        assert result.pieces == ((0.0, 2.0),)

    def test_empty_members_still_count(self):
        result = aggregate_intervals([PredictionSet.empty(), PredictionSet.empty(), (0.0, 1.0)], 0.5)
        assert result.is_empty

    def test_no_intervals(self):
        with pytest.raises(InvalidInputError):
            aggregate_intervals([], 0.5)
        with pytest.raises(InvalidInputError):
            aggregate_interval_batch([], 0.5)

    @given(
        st.lists(
            st.lists(st.tuples(st.integers(-10, 10), st.integers(-3, 8)), min_size=3, max_size=3),
            min_size=1,
            max_size=7,
        ),
        st.sampled_from([0.2, 0.5, 0.8]),
        st.lists(st.integers(-12, 20), min_size=3, max_size=3),
    )
    def test_batch_matches_pointwise_sweep(self, members, gamma, ys):
        # members[b][i] = (start, width) of interval b at test point i; negative width is empty
        lower = np.array([[start for start, _ in row] for row in members], dtype=float)
        upper = np.array([[start + width for start, width in row] for row in members], dtype=float)
        batches = [IntervalBatch(lo, hi) for lo, hi in zip(lower, upper)]
        combined = aggregate_interval_batch(batches, gamma)
        y = np.array(ys, dtype=float)
        for i in range(3):
            pointwise = combined[i]
            assert combined.covers(y)[i] == pointwise.contains(y[i])
            assert combined.lengths()[i] == pytest.approx(pointwise.lebesgue_length)

    @given(
        st.lists(st.tuples(st.integers(-6, 6), st.integers(-1, 5)), min_size=1, max_size=9),
        st.sampled_from([0.1, 0.25, 0.5, 0.75, 0.9]),
        st.sampled_from([0.1, 0.25, 0.5, 0.75, 0.9]),
    )
    def test_larger_gamma_gives_a_superset(self, members, gamma_a, gamma_b):
        # small integer endpoints make shared endpoints common; negative width is empty
        intervals = [PredictionSet.interval(float(start), float(start + width)) for start, width in members]
        gamma_small, gamma_large = sorted((gamma_a, gamma_b))
        narrow = aggregate_intervals(intervals, gamma_small)
        wide = aggregate_intervals(intervals, gamma_large)
        for lo, hi in narrow.pieces:
            assert any(outer_lo <= lo and hi <= outer_hi for outer_lo, outer_hi in wide.pieces)

    def test_shared_endpoint_counts_both_intervals(self):
        intervals = [(0.0, 1.0), (1.0, 2.0)]
        assert aggregate_intervals(intervals, 0.25).pieces == ((1.0, 1.0),)
        assert aggregate_intervals(intervals, 0.5).pieces == ((0.0, 2.0),)

    def test_batch_lengths_with_unbounded_members(self):
        combined = MultiSplitBatch(np.array([[-np.inf], [0.0]]), np.array([[np.inf], [1.0]]), threshold=1)
        assert combined.lengths()[0] == np.inf
        combined = MultiSplitBatch(np.array([[-np.inf], [0.0]]), np.array([[np.inf], [1.0]]), threshold=2)
        assert combined.lengths()[0] == 1.0


class FakeModel:
    def __init__(self, lower, upper, matched=10):
        self.lower, self.upper = lower, upper
        self.diagnostics = {"n_matched_cal": matched, "effective_sample_size": matched / 2}

    def predict_intervals(self, contexts):
        n = np.atleast_2d(contexts).shape[0]
        return IntervalBatch(np.full(n, self.lower), np.full(n, self.upper))

    def __call__(self, context):
        return PredictionSet.interval(self.lower, self.upper)


class TestMultiSplitModel:
    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            MultiSplitConfig(repetitions=0)
        with pytest.raises(InvalidInputError):
            MultiSplitConfig(gamma=1.0)
        with pytest.raises(InvalidInputError):
            MultiSplitConfig(level_mode="half")

    def test_split_alpha(self):
        assert MultiSplitConfig().split_alpha(0.1) == 0.1
        assert MultiSplitConfig(gamma=0.5, level_mode="alpha_gamma").split_alpha(0.1) == pytest.approx(0.05)

    def test_failed_repetitions_are_dropped(self):
        seen = []

        def fit_one(split, rep_rng, split_alpha):
            seen.append(split.seed)
            if len(seen) % 2 == 0:
                raise EmptyCalibrationError("nothing matched")
            return FakeModel(float(len(seen)), float(len(seen)) + 4.0)

        model = MultiSplitModel.fit(fit_one, MultiSplitConfig(repetitions=4), 0.1, np.random.default_rng(0))
        assert len(model.models) == 2
        assert model.failures == 2
        assert model.threshold == 1
        assert model.diagnostics["n_matched_cal"] == 10
        assert len(set(seen)) == 4
        # Members [1, 5] and [3, 7]; one vote suffices
        assert model(np.zeros(2)).pieces == ((1.0, 7.0),)

    def test_all_failures_raise(self):
        def fit_one(split, rep_rng, split_alpha):
            raise EmptyCalibrationError("nothing matched")

        with pytest.raises(AggregateFailureError):
            MultiSplitModel.fit(fit_one, MultiSplitConfig(repetitions=3), 0.1, np.random.default_rng(0))

    def test_split_level_is_passed(self):
        levels = []

        def fit_one(split, rep_rng, split_alpha):
            levels.append(split_alpha)
            return FakeModel(0.0, 1.0)

        config = MultiSplitConfig(repetitions=2, gamma=0.5, level_mode="alpha_gamma")
        MultiSplitModel.fit(fit_one, config, 0.2, np.random.default_rng(0))
        assert levels == [pytest.approx(0.1), pytest.approx(0.1)]


class TestCoppIs:
    def test_indicator_rule_reproduces_copp(self, example1, example1_data, small_forest):
        kwargs = dict(split=SplitSpec(seed=3), alpha=0.1, forest_config=small_forest)
        plain = copp_fit(example1_data, example1.target_policy, example1.behavior_policy, rng=np.random.default_rng(6), **kwargs)
        indicator = copp_is_fit(
            example1_data,
            example1.target_policy,
            example1.behavior_policy,
            rng=np.random.default_rng(6),
            weight_rule="indicator",
            **kwargs,
        )
        contexts = np.random.default_rng(1).random((25, 4))
        first, second = plain.predict_intervals(contexts), indicator.predict_intervals(contexts)
        np.testing.assert_array_equal(first.lower, second.lower)
        np.testing.assert_array_equal(first.upper, second.upper)

    def test_pseudo_rule_weights_every_calibration_point(self, example1, example1_data, small_forest):
        model = copp_is_fit(
            example1_data, example1.target_policy, example1.behavior_policy, rng=np.random.default_rng(0), forest_config=small_forest
        )
        assert len(model.cal_weights) == model.diagnostics["n_cal"]
        assert np.all(model.cal_weights > 0)

    def test_unknown_rule(self, example1, example1_data):
        with pytest.raises(InvalidInputError):
            copp_is_fit(example1_data, example1.target_policy, weight_rule="both")


class TestCoppMs:
    def test_small_run(self, example1, example1_data, small_forest):
        model = copp_ms_fit(
            example1_data,
            example1.target_policy,
            example1.behavior_policy,
            MultiSplitConfig(repetitions=3),
            alpha=0.1,
            rng=np.random.default_rng(0),
            forest_config=small_forest,
        )
        contexts, outcomes = example1.sample_test_points(200, np.random.default_rng(1))
        batch = model.predict_intervals(contexts)
        assert isinstance(batch, MultiSplitBatch)
        assert batch.threshold == 2 and len(batch) == 200
        assert 0.0 <= batch.covers(outcomes).mean() <= 1.0
        assert model.diagnostics["repetitions"] == 3

    def test_threads_do_not_change_result(self, example1, example1_data, small_forest):
        def fit(n_jobs):
            return copp_ms_fit(
                example1_data,
                example1.target_policy,
                example1.behavior_policy,
                MultiSplitConfig(repetitions=3, importance_sampling=True, n_jobs=n_jobs),
                rng=np.random.default_rng(2),
                forest_config=small_forest,
            )

        contexts = np.random.default_rng(3).random((20, 4))
        np.testing.assert_array_equal(fit(1).predict_intervals(contexts).lower, fit(3).predict_intervals(contexts).lower)


class TestOperationWrappers:
    def test_single_point_helpers(self, example1, example1_data, small_forest):
        args = (example1_data, example1.target_policy, example1.behavior_policy)
        context = np.full(4, 0.4)
        model = copp_is_fit(*args, SplitSpec(seed=2), 0.1, np.random.default_rng(4), small_forest)
        direct = copp_is_predict(*args, SplitSpec(seed=2), 0.1, np.random.default_rng(4), context, forest_config=small_forest)
        assert direct == model(context)
        np.testing.assert_array_equal(copp_p_value(model, context, 1e9), model.p_value(context, 1e9))

        config = MultiSplitConfig(repetitions=2)
        ms_model = copp_ms_fit(*args, config, 0.1, np.random.default_rng(5), small_forest)
        ms_direct = copp_ms_predict(*args, config, 0.1, np.random.default_rng(5), context, forest_config=small_forest)
        assert ms_direct == ms_model(context)
