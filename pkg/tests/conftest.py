import os
import sys

import numpy as np
import pytest

# Add src to path
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from quantile_forest import QuantileForestConfig
from synthetic import Example1, Example2, Example3


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run Monte Carlo acceptance runs")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte Carlo acceptance runs (enable with --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_forest():
    return QuantileForestConfig(num_trees=25, min_leaf_size=5)


@pytest.fixture
def example1():
    return Example1()


@pytest.fixture
def example1_data(example1):
    return example1.generate(600, np.random.default_rng(7)).data


@pytest.fixture
def example2():
    return Example2()


@pytest.fixture
def example2_data(example2):
    return example2.generate(600, np.random.default_rng(8)).data


@pytest.fixture
def example3():
    return Example3(horizon=3)


@pytest.fixture
def example3_data(example3):
    return example3.generate(600, np.random.default_rng(9)).data
