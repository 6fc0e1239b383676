#!/usr/bin/env python3
"""
Demo script for single-stage COPP.
Fits COPP on Example 1 logged data, prints a few intervals and checks
coverage against fresh target-policy outcomes.
"""

import sys
import os
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

import logging

import numpy as np

from conformal import copp_fit, subsampling_method
from core_types import SplitSpec
from errors import CoppError
from extensions import MultiSplitConfig, aggregate_intervals, copp_is_fit, copp_ms_fit
from quantile_forest import QuantileForestConfig
from synthetic import Example1

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def print_separator(title):
    """Print a visual separator for demo sections."""
    print("\n" + "=" * 60)
    print(f" {title}")
    print("=" * 60)


def report(name, batch, outcomes):
    coverage = batch.covers(outcomes).mean()
    length = batch.lengths().mean()
    marker = "✅" if coverage >= 0.85 else "❌"
    print(f"{marker} {name:<12} coverage {coverage:.3f}   average length {length:.2f}")


def demo_copp(n=2000, test_points=5000, seed=2023):
    scenario = Example1()
    rng = np.random.default_rng(seed)
    data = scenario.generate(n, rng).data
    x_test, y_test = scenario.sample_test_points(test_points, rng)
    forest = QuantileForestConfig(num_trees=100)

    print("=== COPP Demo: Example 1 ===\n")
    print(f"Logged {data.n} records, {int(data.actions.sum())} treated")

    print_separator("Step 1: Fit COPP with an estimated behavior policy")
    model = copp_fit(data, scenario.target_policy, None, SplitSpec(0.75, seed), 0.1, rng, forest)
    diagnostics = model.diagnostics
    print(f"Calibration points matched: {diagnostics['n_matched_cal']} of {diagnostics['n_cal']}")
    print(f"Effective sample size: {diagnostics['effective_sample_size']:.1f}")
    for i in range(3):
        print(f"  x = {np.round(x_test[i], 2)} -> {model(x_test[i]).pieces}")

    print_separator("Step 2: Coverage on target-policy outcomes")
    report("COPP", model.predict_intervals(x_test), y_test)

    sm = subsampling_method(data, scenario.target_policy, None, SplitSpec(0.75, seed), 0.1, rng, forest)
    report("SM", sm.predict_intervals(x_test), y_test)

    is_model = copp_is_fit(data, scenario.target_policy, None, SplitSpec(0.75, seed), 0.1, rng, forest)
    report("COPP-IS", is_model.predict_intervals(x_test), y_test)

    ms_model = copp_ms_fit(data, scenario.target_policy, None, MultiSplitConfig(repetitions=10), 0.1, rng, forest)
    report("COPP-MS", ms_model.predict_intervals(x_test), y_test)

    print_separator("Step 3: Majority vote over intervals")
    votes = [(0.0, 2.0), (1.0, 3.0), (10.0, 11.0)]
    print(f"Intervals {votes} with gamma 0.5 -> {aggregate_intervals(votes, 0.5).pieces}")

    print_separator("Demo Complete!")


if __name__ == "__main__":
    try:
        demo_copp()
    except CoppError as e:
        logger.error(f"Demo failed: {e}")
        print(f"❌ Demo failed: {e}")
