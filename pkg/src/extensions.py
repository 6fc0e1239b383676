"""COPP-IS (importance-weighted calibration) and COPP-MS (multi-split aggregation)."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core_types import (
    POSITIVITY_FLOOR,
    BanditDataset,
    IntervalBatch,
    Policy,
    PredictionSet,
    SplitSpec,
    as_2d,
    derive_rng,
)
from conformal import CoppModel, copp_fit, fit_weighted_cqr, prepare_matching
from errors import AggregateFailureError, CoppError, InvalidInputError
from quantile_forest import QuantileForestConfig

logger = logging.getLogger(__name__)

WEIGHT_RULES = ("pseudo", "indicator")
LEVEL_MODES = ("alpha", "alpha_gamma")


def copp_is_fit(
    data: BanditDataset,
    target: Policy,
    behavior: Optional[Policy] = None,
    split: SplitSpec = SplitSpec(),
    alpha: float = 0.1,
    rng: Optional[np.random.Generator] = None,
    forest_config: Optional[QuantileForestConfig] = None,
    penalized: bool = False,
    weight_rule: str = "pseudo",
    floor: float = POSITIVITY_FLOOR,
) -> CoppModel:
    """
    COPP with importance weights over the whole calibration set.

    The forest still trains on matched training records. Every calibration
    record enters with weight pi_a(T_i|X_i)·w(X_i) ("pseudo"), or
    1[A_i = T_i]·w(X_i) ("indicator", which reproduces plain COPP).
    """
    if weight_rule not in WEIGHT_RULES:
        raise InvalidInputError(f"weight_rule must be one of {WEIGHT_RULES}, got {weight_rule!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    state = prepare_matching(data, target, behavior, split, rng, penalized, floor)
    train_s, calibration = state.train_matched, state.calibration

    cal_contexts = data.contexts[calibration]
    cal_actions = data.actions[calibration]
    base = state.pseudo.weights(cal_contexts)
    if weight_rule == "pseudo":
        pseudo_mass = state.pseudo.probabilities(cal_contexts)[np.arange(len(calibration)), cal_actions]
        weights = pseudo_mass * base
    else:
        weights = state.matched[calibration].astype(float) * base

    return fit_weighted_cqr(
        data.contexts[train_s],
        data.outcomes[train_s],
        cal_contexts,
        data.outcomes[calibration],
        weights,
        state.pseudo.weights,
        alpha,
        rng,
        forest_config,
        state.diagnostics(),
    )


def copp_is_predict(
    data: BanditDataset,
    target: Policy,
    behavior: Optional[Policy],
    split: SplitSpec,
    alpha: float,
    rng: np.random.Generator,
    x_new: np.ndarray,
    **kwargs,
) -> PredictionSet:
    return copp_is_fit(data, target, behavior, split, alpha, rng, **kwargs)(x_new)


def copp_p_value(model: CoppModel, context: np.ndarray, y) -> Union[float, np.ndarray]:
    return model.p_value(context, y)


def majority_threshold(repetitions: int, gamma: float) -> int:
    """ceil((1 - gamma)·B), at least 1."""
    return max(1, math.ceil((1.0 - gamma) * repetitions - 1e-9))


def aggregate_intervals(
    intervals: Sequence[Union[PredictionSet, Tuple[float, float]]], gamma: float
) -> PredictionSet:
    """
    Points covered by at least ceil((1-gamma)·B) of B intervals, found exactly.

    Sweeps the sorted endpoints keeping a count of active intervals; at a tie
    openings are processed before closings, since the intervals are closed.
    Empty members still count toward B.
    """
    if not intervals:
        raise InvalidInputError("need at least one interval to aggregate")
    return sweep_intervals(intervals, majority_threshold(len(intervals), gamma))


def sweep_intervals(
    intervals: Sequence[Union[PredictionSet, Tuple[float, float]]], threshold: int
) -> PredictionSet:
    """Maximal regions where at least `threshold` of the intervals overlap."""
    events = []
    for interval in intervals:
        pieces = interval.pieces if isinstance(interval, PredictionSet) else [interval]
        for lo, hi in pieces:
            if lo <= hi:
                events.append((float(lo), 0, 1))
                events.append((float(hi), 1, -1))
    events.sort()

    pieces = []
    active = 0
    start = None
    for position, _, delta in events:
        active += delta
        if delta > 0 and active >= threshold and start is None:
            start = position
        elif delta < 0 and active < threshold and start is not None:
            pieces.append((start, position))
            start = None
    return PredictionSet(tuple(pieces))


@dataclass(frozen=True)
class MultiSplitBatch:
    """B stacked interval batches and the vote threshold that combines them."""

    lower: np.ndarray
    upper: np.ndarray
    threshold: int

    def __len__(self) -> int:
        return self.lower.shape[1]

    def __getitem__(self, index: int) -> PredictionSet:
        pairs = list(zip(self.lower[:, index], self.upper[:, index]))
        return sweep_intervals(pairs, self.threshold)

    def covers(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float).ravel()
        votes = np.sum((self.lower <= y) & (y <= self.upper), axis=0)
        return votes >= self.threshold

    def lengths(self) -> np.ndarray:
        empty = self.lower > self.upper
        lower = np.where(empty, np.inf, self.lower)
        upper = np.where(empty, np.inf, self.upper)
        positions = np.concatenate([lower, upper], axis=0)
        deltas = np.concatenate([np.ones_like(lower), -np.ones_like(upper)], axis=0)
        # Openings sort before closings at equal positions
        tie_break = np.concatenate([np.zeros_like(lower), np.ones_like(upper)], axis=0)
        order = np.lexsort((tie_break, positions), axis=0)
        positions = np.take_along_axis(positions, order, axis=0)
        active = np.cumsum(np.take_along_axis(deltas, order, axis=0), axis=0)
        with np.errstate(invalid="ignore"):
            gaps = np.diff(positions, axis=0)
        gaps = np.where(np.isnan(gaps), 0.0, gaps)
        inside = active[:-1] >= self.threshold
        return np.sum(np.where(inside, gaps, 0.0), axis=0)

    def to_sets(self) -> List[PredictionSet]:
        return [self[i] for i in range(len(self))]


def aggregate_interval_batch(batches: Sequence[IntervalBatch], gamma: float) -> MultiSplitBatch:
    if not batches:
        raise InvalidInputError("need at least one interval batch to aggregate")
    lower = np.vstack([batch.lower for batch in batches])
    upper = np.vstack([batch.upper for batch in batches])
    return MultiSplitBatch(lower, upper, majority_threshold(len(batches), gamma))


@dataclass(frozen=True)
class MultiSplitConfig:
    repetitions: int = 100
    gamma: float = 0.5
    level_mode: str = "alpha"
    importance_sampling: bool = False
    train_fraction: float = 0.75
    n_jobs: int = 1

    def __post_init__(self):
        if self.repetitions < 1:
            raise InvalidInputError(f"repetitions must be >= 1, got {self.repetitions}")
        if not 0.0 < self.gamma < 1.0:
            raise InvalidInputError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.level_mode not in LEVEL_MODES:
            raise InvalidInputError(f"level_mode must be one of {LEVEL_MODES}, got {self.level_mode!r}")
        if self.n_jobs < 1:
            raise InvalidInputError(f"n_jobs must be >= 1, got {self.n_jobs}")

    def split_alpha(self, alpha: float) -> float:
        """Per-repetition level: alpha itself, or alpha·gamma."""
        return alpha if self.level_mode == "alpha" else alpha * self.gamma


FitOne = Callable[[SplitSpec, np.random.Generator, float], Any]


@dataclass
class MultiSplitModel:
    """B independently re-split, re-sampled models combined by a vote."""

    models: List[Any]
    gamma: float
    failures: int = 0
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def threshold(self) -> int:
        return majority_threshold(len(self.models), self.gamma)

    def predict_intervals(self, contexts: np.ndarray) -> MultiSplitBatch:
        contexts = as_2d(contexts)
        return aggregate_interval_batch([model.predict_intervals(contexts) for model in self.models], self.gamma)

    def __call__(self, context: np.ndarray) -> PredictionSet:
        context = as_2d(context)
        return aggregate_intervals([model(context) for model in self.models], self.gamma)

    @classmethod
    def fit(cls, fit_one: FitOne, config: MultiSplitConfig, alpha: float, rng: np.random.Generator) -> "MultiSplitModel":
        """
        Run fit_one B times and keep the survivors.

        Repetition b gets its own generator derived from one seed drawn from
        rng, and a fresh split seed from that generator, so both the split and
        the pseudo-action draw change between repetitions.

        Raises:
            AggregateFailureError: every repetition failed
        """
        master = int(rng.integers(0, 2**31 - 1))
        split_alpha = config.split_alpha(alpha)

        def run(b: int):
            rep_rng = derive_rng(master, b, "multi-split")
            split = SplitSpec(config.train_fraction, int(rep_rng.integers(0, 2**31 - 1)))
            try:
                return fit_one(split, rep_rng, split_alpha)
            except CoppError as error:
                logger.warning(f"Multi-split repetition {b} failed: {error}")
                return None

        if config.n_jobs > 1:
            with ThreadPoolExecutor(max_workers=config.n_jobs) as pool:
                results = list(pool.map(run, range(config.repetitions)))
        else:
            results = [run(b) for b in range(config.repetitions)]

        models = [model for model in results if model is not None]
        failures = config.repetitions - len(models)
        if not models:
            raise AggregateFailureError(f"all {config.repetitions} multi-split repetitions failed")

        matched = [model.diagnostics.get("n_matched_cal", np.nan) for model in models]
        ess = [model.diagnostics.get("effective_sample_size", np.nan) for model in models]
        diagnostics = {
            "repetitions": config.repetitions,
            "failures": failures,
            "n_matched_cal": float(np.nanmean(matched)),
            "effective_sample_size": float(np.nanmean(ess)),
        }
        logger.info(f"Multi-split: {len(models)}/{config.repetitions} repetitions succeeded")
        return cls(models, config.gamma, failures, diagnostics)


def copp_ms_fit(
    data: BanditDataset,
    target: Policy,
    behavior: Optional[Policy] = None,
    config: MultiSplitConfig = MultiSplitConfig(),
    alpha: float = 0.1,
    rng: Optional[np.random.Generator] = None,
    forest_config: Optional[QuantileForestConfig] = None,
    penalized: bool = False,
) -> MultiSplitModel:
    """COPP-MS, or COPP-IS-MS when config.importance_sampling is set."""
    rng = rng if rng is not None else np.random.default_rng(0)

    def fit_one(split: SplitSpec, rep_rng: np.random.Generator, split_alpha: float):
        if config.importance_sampling:
            return copp_is_fit(data, target, behavior, split, split_alpha, rep_rng, forest_config, penalized)
        return copp_fit(data, target, behavior, split, split_alpha, rep_rng, forest_config, penalized)

    return MultiSplitModel.fit(fit_one, config, alpha, rng)


def copp_ms_predict(
    data: BanditDataset,
    target: Policy,
    behavior: Optional[Policy],
    config: MultiSplitConfig,
    alpha: float,
    rng: np.random.Generator,
    x_new: np.ndarray,
    **kwargs,
) -> PredictionSet:
    return copp_ms_fit(data, target, behavior, config, alpha, rng, **kwargs)(x_new)
