"""
Kernel-smoothed importance-sampling and doubly robust confidence intervals.

These target the conditional MEAN of the target-policy outcome at a query
context, so they are expected to undercover the realized outcome; they are
kept as comparators for the prediction intervals.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax
from scipy.stats import norm

from core_types import (
    POSITIVITY_FLOOR,
    BanditDataset,
    IntervalBatch,
    Policy,
    TrajectoryDataset,
    as_2d,
    clip_probabilities,
)
from errors import DegenerateNeighborhoodError, InvalidInputError
from quantile_forest import QuantileForest, QuantileForestConfig

logger = logging.getLogger(__name__)

BANDWIDTH_SCALES = (0.05, 0.1, 0.2, 0.4, 0.8)
LOG_KERNEL_FLOOR = -700.0
_KERNEL_CHUNK = 512


@dataclass(frozen=True)
class KernelConfig:
    """
    Gaussian product kernel.

    `bandwidth` fixes h for every feature; otherwise h_j = scale · std(X_j).
    """

    bandwidth: Optional[float] = None
    scale: float = 0.2
    kernel: str = "gaussian"

    def __post_init__(self):
        if self.kernel != "gaussian":
            raise InvalidInputError(f"only the gaussian kernel is supported, got {self.kernel!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise InvalidInputError(f"bandwidth must be positive, got {self.bandwidth}")
        if not self.scale > 0:
            raise InvalidInputError(f"bandwidth scale must be positive, got {self.scale}")

    def resolve(self, contexts: np.ndarray) -> np.ndarray:
        contexts = as_2d(contexts)
        if self.bandwidth is not None:
            return np.full(contexts.shape[1], float(self.bandwidth))
        spread = np.std(contexts, axis=0)
        spread = np.where(spread > 0, spread, 1.0)
        return self.scale * spread


def kernel_weights(queries: np.ndarray, contexts: np.ndarray, bandwidth: np.ndarray) -> np.ndarray:
    """Self-normalized Gaussian kernel weights, one row per query."""
    queries = as_2d(queries) / bandwidth
    scaled = as_2d(contexts) / bandwidth
    squared = (
        np.sum(queries**2, axis=1)[:, None] + np.sum(scaled**2, axis=1)[None, :] - 2.0 * queries @ scaled.T
    )
    log_kernel = -0.5 * np.maximum(squared, 0.0)
    nearest = log_kernel.max(axis=1)
    if np.any(nearest < LOG_KERNEL_FLOOR):
        raise DegenerateNeighborhoodError(
            f"{int(np.sum(nearest < LOG_KERNEL_FLOOR))} queries have no sample within reach of bandwidth"
        )
    return np.exp(log_softmax(log_kernel, axis=1))


def kernel_ci(
    queries: np.ndarray,
    contexts: np.ndarray,
    terms: np.ndarray,
    bandwidth: np.ndarray,
    alpha: float = 0.1,
) -> IntervalBatch:
    """
    estimate(x) = sum_i k_i(x) r_i with se(x) = sqrt(sum_i k_i(x)^2 (r_i - estimate(x))^2).

    Returns estimate ± z_{1-alpha/2} · se for every query row.
    """
    if not 0.0 < alpha < 1.0:
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")
    queries = as_2d(queries)
    terms = np.asarray(terms, dtype=float).ravel()
    z = norm.ppf(1.0 - alpha / 2.0)
    estimates = np.empty(queries.shape[0])
    errors = np.empty(queries.shape[0])
    for start in range(0, queries.shape[0], _KERNEL_CHUNK):
        rows = slice(start, start + _KERNEL_CHUNK)
        weights = kernel_weights(queries[rows], contexts, bandwidth)
        estimate = weights @ terms
        residual = terms[None, :] - estimate[:, None]
        estimates[rows] = estimate
        errors[rows] = np.sqrt(np.sum(weights**2 * residual**2, axis=1))
    return IntervalBatch(estimates - z * errors, estimates + z * errors)


class OutcomeModel(Protocol):
    num_actions: int

    def predict(self, contexts: np.ndarray) -> np.ndarray:
        """n×m matrix of per-arm conditional means."""
        ...


class ZeroOutcomeModel:
    def __init__(self, num_actions: int):
        self.num_actions = num_actions

    def predict(self, contexts: np.ndarray) -> np.ndarray:
        return np.zeros((as_2d(contexts).shape[0], self.num_actions))


class ForestOutcomeModel:
    """Per-arm forest means mu_t(x)."""

    def __init__(self, num_actions: int, forest_config: Optional[QuantileForestConfig] = None):
        self.num_actions = num_actions
        self.forest_config = forest_config
        self.forests = []

    def fit(self, data: BanditDataset, rng: np.random.Generator) -> "ForestOutcomeModel":
        self.forests = []
        for arm in range(self.num_actions):
            rows = np.flatnonzero(data.actions == arm)
            self.forests.append(
                QuantileForest(self.forest_config).fit(data.contexts[rows], data.outcomes[rows], rng)
            )
        return self

    def predict(self, contexts: np.ndarray) -> np.ndarray:
        contexts = as_2d(contexts)
        return np.column_stack([forest.predict_mean(contexts) for forest in self.forests])


def importance_ratios(
    data: BanditDataset, target: Policy, behavior: Policy, floor: float = POSITIVITY_FLOOR
) -> np.ndarray:
    rows = np.arange(data.n)
    target_mass = target.probabilities(data.contexts)[rows, data.actions]
    behavior_mass = clip_probabilities(behavior.probabilities(data.contexts), floor)[rows, data.actions]
    return target_mass / behavior_mass


def is_terms(data: BanditDataset, target: Policy, behavior: Policy) -> np.ndarray:
    return importance_ratios(data, target, behavior) * data.outcomes


def dr_terms(data: BanditDataset, target: Policy, behavior: Policy, outcome_model: OutcomeModel) -> np.ndarray:
    """rho_i (Y_i - mu_{T_i}(X_i)) + sum_t pi_e(t|X_i) mu_t(X_i)."""
    means = outcome_model.predict(data.contexts)
    observed = means[np.arange(data.n), data.actions]
    baseline = np.sum(target.probabilities(data.contexts) * means, axis=1)
    return importance_ratios(data, target, behavior) * (data.outcomes - observed) + baseline


def is_kernel_ci(
    data: BanditDataset,
    target: Policy,
    behavior: Policy,
    config: KernelConfig,
    alpha: float,
    queries: np.ndarray,
) -> IntervalBatch:
    bandwidth = config.resolve(data.contexts)
    return kernel_ci(queries, data.contexts, is_terms(data, target, behavior), bandwidth, alpha)


def dr_kernel_ci(
    data: BanditDataset,
    target: Policy,
    behavior: Policy,
    outcome_model: OutcomeModel,
    config: KernelConfig,
    alpha: float,
    queries: np.ndarray,
) -> IntervalBatch:
    bandwidth = config.resolve(data.contexts)
    return kernel_ci(queries, data.contexts, dr_terms(data, target, behavior, outcome_model), bandwidth, alpha)


def trajectory_ratios(
    data: TrajectoryDataset,
    targets: Sequence[Policy],
    behaviors: Sequence[Policy],
    floor: float = POSITIVITY_FLOOR,
) -> np.ndarray:
    """prod_k pi_e,k(T_k|H_k) / pi_b,k(T_k|H_k)."""
    rows = np.arange(data.n)
    ratio = np.ones(data.n)
    for stage in range(1, data.horizon + 1):
        history = data.history_features(stage)
        taken = data.stage_actions[:, stage - 1]
        target_mass = targets[stage - 1].probabilities(history)[rows, taken]
        behavior_mass = clip_probabilities(behaviors[stage - 1].probabilities(history), floor)[rows, taken]
        ratio *= target_mass / behavior_mass
    return ratio


def trajectory_is_kernel_ci(
    data: TrajectoryDataset,
    targets: Sequence[Policy],
    behaviors: Sequence[Policy],
    config: KernelConfig,
    alpha: float,
    queries: np.ndarray,
) -> IntervalBatch:
    terms = trajectory_ratios(data, targets, behaviors) * data.outcomes
    bandwidth = config.resolve(data.initial_states)
    return kernel_ci(queries, data.initial_states, terms, bandwidth, alpha)


def trajectory_dr_kernel_ci(
    data: TrajectoryDataset,
    targets: Sequence[Policy],
    behaviors: Sequence[Policy],
    initial_mean: Callable[[np.ndarray], np.ndarray],
    config: KernelConfig,
    alpha: float,
    queries: np.ndarray,
) -> IntervalBatch:
    """DR with a regression mu(X_1) of the outcome on the initial state as the baseline."""
    baseline = np.asarray(initial_mean(data.initial_states), dtype=float).ravel()
    terms = trajectory_ratios(data, targets, behaviors) * (data.outcomes - baseline) + baseline
    bandwidth = config.resolve(data.initial_states)
    return kernel_ci(queries, data.initial_states, terms, bandwidth, alpha)


def select_bandwidth(
    build_ci: Callable[[KernelConfig], IntervalBatch],
    tuning_outcomes: np.ndarray,
    scales: Sequence[float] = BANDWIDTH_SCALES,
) -> Tuple[KernelConfig, Dict[float, float]]:
    """
    Pick the bandwidth scale whose intervals cover the most tuning outcomes.

    Args:
        build_ci: Maps a KernelConfig to intervals at the tuning contexts
        tuning_outcomes: Realized target-policy outcomes at those contexts
        scales: Candidate multiples of the per-feature standard deviation

    Returns:
        (chosen config, coverage per scale); ties go to the smaller scale
    """
    coverages: Dict[float, float] = {}
    for scale in scales:
        config = KernelConfig(scale=scale)
        try:
            coverages[scale] = float(np.mean(build_ci(config).covers(tuning_outcomes)))
        except DegenerateNeighborhoodError:
            coverages[scale] = -1.0
    best = max(sorted(coverages), key=lambda scale: (coverages[scale], -scale))
    logger.info(f"Kernel bandwidth scale {best} chosen (tuning coverage {coverages[best]:.3f})")
    return KernelConfig(scale=best), coverages
