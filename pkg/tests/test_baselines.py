import numpy as np
import pytest

from baselines import (
    BANDWIDTH_SCALES,
    ForestOutcomeModel,
    KernelConfig,
    ZeroOutcomeModel,
    dr_kernel_ci,
    dr_terms,
    is_kernel_ci,
    is_terms,
    kernel_ci,
    kernel_weights,
    select_bandwidth,
    trajectory_dr_kernel_ci,
    trajectory_is_kernel_ci,
    trajectory_ratios,
)
from core_types import IntervalBatch
from errors import DegenerateNeighborhoodError, InvalidInputError


class TestKernel:
    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            KernelConfig(kernel="epanechnikov")
        with pytest.raises(InvalidInputError):
            KernelConfig(bandwidth=0.0)
        with pytest.raises(InvalidInputError):
            KernelConfig(scale=-1.0)

    def test_resolve(self):
        contexts = np.column_stack([np.arange(10.0), np.full(10, 3.0)])
        bandwidth = KernelConfig(scale=0.5).resolve(contexts)
        assert bandwidth[0] == pytest.approx(0.5 * np.std(np.arange(10.0)))
        assert bandwidth[1] == 0.5
        np.testing.assert_array_equal(KernelConfig(bandwidth=2.0).resolve(contexts), [2.0, 2.0])

    def test_weights_are_normalized(self, rng):
        contexts = rng.random((200, 3))
        weights = kernel_weights(rng.random((7, 3)), contexts, np.full(3, 0.2))
        assert weights.shape == (7, 200)
        np.testing.assert_allclose(weights.sum(axis=1), 1.0)

    def test_nearest_point_dominates_at_small_bandwidth(self):
        contexts = np.array([[0.0], [1.0], [2.0]])
        weights = kernel_weights(np.array([[0.9]]), contexts, np.array([0.05]))
        assert weights[0, 1] > 0.99

    def test_far_queries_raise(self):
        with pytest.raises(DegenerateNeighborhoodError):
            kernel_weights(np.array([[100.0]]), np.zeros((5, 1)), np.array([0.01]))

    def test_constant_terms_give_zero_width(self, rng):
        contexts = rng.random((50, 2))
        batch = kernel_ci(rng.random((4, 2)), contexts, np.full(50, 3.0), np.full(2, 0.3))
        np.testing.assert_allclose(batch.lower, 3.0)
        np.testing.assert_allclose(batch.upper, 3.0)

    def test_chunked_queries_match(self, rng):
        contexts = rng.random((80, 2))
        terms = rng.standard_normal(80)
        queries = rng.random((1100, 2))
        whole = kernel_ci(queries, contexts, terms, np.full(2, 0.3))
        part = kernel_ci(queries[1000:], contexts, terms, np.full(2, 0.3))
        np.testing.assert_allclose(whole.lower[1000:], part.lower)

    def test_alpha_validated(self):
        with pytest.raises(InvalidInputError):
            kernel_ci(np.zeros((1, 1)), np.zeros((2, 1)), np.zeros(2), np.ones(1), alpha=1.0)


class TestTerms:
    def test_no_shift_ratios_are_one(self, example1, example1_data):
        behavior = example1.behavior_policy
        np.testing.assert_allclose(is_terms(example1_data, behavior, behavior), example1_data.outcomes)

    def test_dr_with_zero_model_is_importance_sampling(self, example1, example1_data):
        target, behavior = example1.target_policy, example1.behavior_policy
        np.testing.assert_array_equal(
            dr_terms(example1_data, target, behavior, ZeroOutcomeModel(2)), is_terms(example1_data, target, behavior)
        )

    def test_forest_outcome_model(self, example1_data, small_forest):
        model = ForestOutcomeModel(2, small_forest).fit(example1_data, np.random.default_rng(0))
        assert model.predict(example1_data.contexts[:5]).shape == (5, 2)

    def test_trajectory_ratios_without_shift(self, example3, example3_data):
        behaviors = example3.behavior_policies
        np.testing.assert_allclose(trajectory_ratios(example3_data, behaviors, behaviors), 1.0)


class TestIntervals:
    def test_is_and_dr_shapes(self, example1, example1_data, small_forest):
        target, behavior = example1.target_policy, example1.behavior_policy
        queries = np.random.default_rng(0).random((30, 4))
        config = KernelConfig(scale=0.4)
        first = is_kernel_ci(example1_data, target, behavior, config, 0.1, queries)
        model = ForestOutcomeModel(2, small_forest).fit(example1_data, np.random.default_rng(1))
        second = dr_kernel_ci(example1_data, target, behavior, model, config, 0.1, queries)
        for batch in (first, second):
            assert len(batch) == 30
            assert np.all(batch.upper >= batch.lower)

    def test_trajectory_intervals(self, example3, example3_data):
        targets, behaviors = example3.target_policies, example3.behavior_policies
        queries = np.zeros((6, 1))
        config = KernelConfig(scale=0.4)
        first = trajectory_is_kernel_ci(example3_data, targets, behaviors, config, 0.1, queries)
        second = trajectory_dr_kernel_ci(
            example3_data, targets, behaviors, lambda x: np.zeros(len(x)), config, 0.1, queries
        )
        np.testing.assert_allclose(first.lower, second.lower)
        np.testing.assert_allclose(first.upper, second.upper)


class TestBandwidthSelection:
    def test_ties_go_to_smallest_scale(self):
        def everything(config):
            return IntervalBatch(np.full(5, -np.inf), np.full(5, np.inf))

        config, coverages = select_bandwidth(everything, np.zeros(5))
        assert config.scale == min(BANDWIDTH_SCALES)
        assert set(coverages) == set(BANDWIDTH_SCALES)

    def test_best_coverage_wins(self):
        def widening(config):
            return IntervalBatch(np.full(4, -config.scale), np.full(4, config.scale))

        config, coverages = select_bandwidth(widening, np.array([0.0, 0.15, 0.3, 0.5]))
        assert config.scale == 0.8
        assert coverages[0.05] == 0.25

    def test_degenerate_scales_lose(self):
        def fragile(config):
            if config.scale < 0.4:
                raise DegenerateNeighborhoodError("too narrow")
            return IntervalBatch(np.zeros(2), np.zeros(2))

        config, coverages = select_bandwidth(fragile, np.ones(2))
        assert config.scale == 0.4
        assert coverages[0.05] == -1.0
