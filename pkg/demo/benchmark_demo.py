#!/usr/bin/env python3
"""
Demo script for the experiment runner.
Runs a small Example 1 comparison and writes CSV / JSON reports.
"""

import sys
import os
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

import logging
from pathlib import Path

from bench import ExperimentConfig, emit_report, run_experiment
from quantile_forest import QuantileForestConfig
from synthetic import ScenarioSpec

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def demo_benchmark(out_dir=Path("./results/demo")):
    config = ExperimentConfig(
        scenario=ScenarioSpec(example=1, n=2000),
        methods=("COPP", "COPP-IS", "SM", "DM-true", "IS-CI", "DR-CI"),
        replications=5,
        test_points=2000,
        forest=QuantileForestConfig(num_trees=100),
        threads=2,
        name="benchmark-demo",
    )

    print("=== Benchmark Demo ===\n")
    print(f"Methods: {', '.join(config.methods)}")
    print(f"Replications: {config.replications}\n")

    report = run_experiment(config)
    for method, stats in report.summary().items():
        print(
            f"{method:<8} coverage {stats['mean_coverage']:.3f} ± {stats['sd_coverage']:.3f}   "
            f"length {stats['mean_length']:.2f}   failures {stats['failures']}"
        )

    paths = emit_report(report, out_dir)
    print(f"\n✅ Reports written: {', '.join(str(path) for path in paths)}")


if __name__ == "__main__":
    demo_benchmark()
