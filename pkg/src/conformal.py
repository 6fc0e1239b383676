"""
Weighted conformal engine and the single-stage COPP pipeline.

  • cqr_score / WeightedScoreSet / weighted_quantile: the building blocks
  • CoppModel: a fitted weighted-CQR predictor (quantile forest + weighted
    calibration scores + a test-weight function)
  • copp_fit: pseudo-policy subsampling, matched forest, weighted calibration
  • subsampling_method: the same pipeline with target-policy sampling and no
    weights (a biased comparator)
  • direct_method: weighted CP with outcome-dependent density-ratio weights
"""

import logging
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Protocol

import numpy as np
from scipy.stats import norm

from core_types import (
    POSITIVITY_FLOOR,
    QUANTILE_TOLERANCE,
    BanditDataset,
    IntervalBatch,
    Policy,
    PredictionSet,
    SetBatch,
    SplitSpec,
    as_2d,
    clip_probabilities,
    split_dataset,
)
from errors import EmptyCalibrationError, InvalidInputError
from propensity import PseudoPolicy, fit_logistic, fit_penalized_logistic, sample_policy_actions
from quantile_forest import QuantileForest, QuantileForestConfig

logger = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-300
DEFAULT_GRID_SIZE = 512


def cqr_score(y, q_lo, q_hi):
    """max(q_lo - y, y - q_hi): negative strictly inside (q_lo, q_hi), zero on its boundary."""
    y, q_lo, q_hi = (np.asarray(v, dtype=float) for v in (y, q_lo, q_hi))
    if np.any(q_lo > q_hi):
        raise InvalidInputError("conformity score needs q_lo <= q_hi")
    score = np.maximum(q_lo - y, y - q_hi)
    return float(score) if score.ndim == 0 else score


def effective_sample_size(weights: np.ndarray) -> float:
    """(sum w)^2 / sum w^2, i.e. 1 / sum p_i^2 for the normalized weights."""
    weights = np.asarray(weights, dtype=float)
    squares = np.sum(weights**2)
    return float(np.sum(weights) ** 2 / squares) if squares > 0 else 0.0


@dataclass(frozen=True)
class WeightedScoreSet:
    """Calibration scores with nonnegative weights plus the mass destined for +inf."""

    scores: np.ndarray
    weights: np.ndarray
    test_weight: float

    def __post_init__(self):
        scores = np.array(self.scores, dtype=float).ravel()
        weights = np.array(self.weights, dtype=float).ravel()
        if scores.shape != weights.shape:
            raise InvalidInputError(f"{len(scores)} scores but {len(weights)} weights")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise InvalidInputError("weights must be finite and non-negative")
        if not np.isfinite(self.test_weight) or self.test_weight < 0:
            raise InvalidInputError(f"test weight must be finite and non-negative, got {self.test_weight}")
        if weights.sum() + self.test_weight <= 0:
            raise InvalidInputError("a weighted score set needs some positive mass")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "test_weight", float(self.test_weight))

    def probabilities(self):
        """Normalized (p_i, p_inf)."""
        total = self.weights.sum() + self.test_weight
        return self.weights / total, self.test_weight / total


def weighted_quantiles(scores, weights, test_weights, level: float) -> np.ndarray:
    """
    Level-quantile of sum_i p_i δ(S_i) + p_inf δ(+inf), one per test weight.

    Returns the smallest score whose cumulative normalized mass reaches the
    level (ties in scores share their cumulative mass), or +inf when only the
    point mass at infinity gets there. The target mass is shrunk by a relative
    QUANTILE_TOLERANCE so a cumulative sum landing exactly on level·total is not
    lost to rounding (0.7 * 10 evaluates to 7.000000000000001).
    """
    scores = np.asarray(scores, dtype=float).ravel()
    weights = np.asarray(weights, dtype=float).ravel()
    test_weights = np.atleast_1d(np.asarray(test_weights, dtype=float))
    if not 0.0 < level < 1.0:
        raise InvalidInputError(f"quantile level must lie in (0, 1), got {level}")

    result = np.full(test_weights.shape, np.inf)
    if len(scores) == 0:
        return result

    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    cumulative = np.cumsum(weights[order])
    totals = cumulative[-1] + test_weights
    if np.any(totals <= 0):
        raise InvalidInputError("a weighted score set needs some positive mass")

    thresholds = level * totals * (1.0 - QUANTILE_TOLERANCE)
    index = np.searchsorted(cumulative, thresholds, side="left")
    reached = index < len(sorted_scores)
    result[reached] = sorted_scores[index[reached]]
    return result


def weighted_quantile(score_set: WeightedScoreSet, level: float) -> float:
    return float(weighted_quantiles(score_set.scores, score_set.weights, [score_set.test_weight], level)[0])


@dataclass
class CoppModel:
    """
    Fitted weighted conformalized quantile regression.

    The forest gives (q_lo, q_hi) at levels alpha/2 and 1-alpha/2; each query
    widens that band by the weighted (1-alpha)-quantile of the calibration
    scores, where the query's own weight goes to the point mass at +inf.
    """

    forest: QuantileForest
    cal_scores: np.ndarray
    cal_weights: np.ndarray
    test_weight_fn: Callable[[np.ndarray], np.ndarray]
    alpha: float
    alpha_lower: float
    alpha_upper: float
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def quantile_band(self, contexts: np.ndarray):
        return self.forest.predict_interval(as_2d(contexts), self.alpha_lower, self.alpha_upper)

    def thresholds(self, contexts: np.ndarray) -> np.ndarray:
        """Q_{1-alpha}(x) for every query row."""
        test_weights = np.asarray(self.test_weight_fn(as_2d(contexts)), dtype=float)
        return weighted_quantiles(self.cal_scores, self.cal_weights, test_weights, 1.0 - self.alpha)

    def predict_intervals(self, contexts: np.ndarray) -> IntervalBatch:
        contexts = as_2d(contexts)
        q_lo, q_hi = self.quantile_band(contexts)
        widen = self.thresholds(contexts)
        return IntervalBatch(q_lo - widen, q_hi + widen)

    def __call__(self, context: np.ndarray) -> PredictionSet:
        return self.predict_intervals(as_2d(context))[0]

    def p_value(self, context: np.ndarray, y) -> np.ndarray:
        """
        Weighted conformal p-value of candidate outcome(s) y at one context.

        p(x, y) = sum_i p_i 1[score(x, y) <= S_i] + p_inf
        """
        context = as_2d(context)
        if context.shape[0] != 1:
            raise InvalidInputError("p_value takes a single context")
        q_lo, q_hi = self.quantile_band(context)
        scores = cqr_score(np.asarray(y, dtype=float), q_lo[0], q_hi[0])
        test_weight = float(np.asarray(self.test_weight_fn(context), dtype=float).ravel()[0])
        total = self.cal_weights.sum() + test_weight
        dominated = (np.asarray(scores)[..., None] <= self.cal_scores).astype(float)
        p = (dominated @ self.cal_weights + test_weight) / total
        return float(p) if np.ndim(p) == 0 else p


def fit_weighted_cqr(
    train_features: np.ndarray,
    train_outcomes: np.ndarray,
    cal_features: np.ndarray,
    cal_outcomes: np.ndarray,
    cal_weights: np.ndarray,
    test_weight_fn: Callable[[np.ndarray], np.ndarray],
    alpha: float,
    rng: np.random.Generator,
    forest_config: Optional[QuantileForestConfig] = None,
    diagnostics: Optional[Dict[str, Any]] = None,
) -> CoppModel:
    """Fit the quantile forest on the training part and score the calibration part."""
    if not 0.0 < alpha < 1.0:
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")
    diagnostics = dict(diagnostics or {})
    if len(cal_outcomes) == 0:
        raise EmptyCalibrationError("no calibration point survived matching", diagnostics)

    forest = QuantileForest(forest_config).fit(train_features, train_outcomes, rng)
    alpha_lower, alpha_upper = alpha / 2.0, 1.0 - alpha / 2.0
    q_lo, q_hi = forest.predict_interval(cal_features, alpha_lower, alpha_upper)
    scores = cqr_score(cal_outcomes, q_lo, q_hi)
    cal_weights = np.asarray(cal_weights, dtype=float)
    diagnostics["effective_sample_size"] = effective_sample_size(cal_weights)

    return CoppModel(
        forest=forest,
        cal_scores=np.atleast_1d(scores),
        cal_weights=cal_weights,
        test_weight_fn=test_weight_fn,
        alpha=alpha,
        alpha_lower=alpha_lower,
        alpha_upper=alpha_upper,
        diagnostics=diagnostics,
    )


def resolve_behavior(
    data: BanditDataset,
    train: np.ndarray,
    behavior: Optional[Policy],
    rng: np.random.Generator,
    penalized: bool = False,
) -> Policy:
    """Return the known behavior policy, or fit a logistic one on the training rows."""
    if behavior is not None:
        return behavior
    features, labels = data.contexts[train], data.actions[train]
    if penalized:
        model = fit_penalized_logistic(features, labels, rng, num_actions=data.num_actions)
    else:
        model = fit_logistic(features, labels, num_actions=data.num_actions)
    return model.as_policy()


@dataclass
class MatchingState:
    """Everything the single-stage pipelines share up to (and including) matching."""

    train: np.ndarray
    calibration: np.ndarray
    behavior: Optional[Policy]
    pseudo: Optional[PseudoPolicy]
    sampled_actions: np.ndarray
    actions: np.ndarray

    @property
    def matched(self) -> np.ndarray:
        return self.sampled_actions == self.actions

    @property
    def train_matched(self) -> np.ndarray:
        return self.train[self.matched[self.train]]

    @property
    def calibration_matched(self) -> np.ndarray:
        return self.calibration[self.matched[self.calibration]]

    def diagnostics(self) -> Dict[str, Any]:
        return {
            "n_train": int(len(self.train)),
            "n_cal": int(len(self.calibration)),
            "n_matched_train": int(len(self.train_matched)),
            "n_matched_cal": int(len(self.calibration_matched)),
            "match_rate": float(np.mean(self.matched)),
        }


def prepare_matching(
    data: BanditDataset,
    target: Policy,
    behavior: Optional[Policy],
    split: SplitSpec,
    rng: np.random.Generator,
    penalized: bool = False,
    floor: float = POSITIVITY_FLOOR,
    sample_from_target: bool = False,
) -> MatchingState:
    """
    Split, resolve the behavior policy, and draw one sampled action per record.

    Pseudo actions come from pi_a by default; sample_from_target draws them
    from pi_e instead, which is what the subsampling comparator does. That
    path needs no behavior policy, so none is fitted and pseudo stays None.
    """
    train, calibration = split_dataset(data, split)
    if sample_from_target:
        behavior_policy, pseudo = behavior, None
        sampled = sample_policy_actions(target, data.contexts, rng)
    else:
        behavior_policy = resolve_behavior(data, train, behavior, rng, penalized)
        pseudo = PseudoPolicy(target, behavior_policy, floor)
        sampled = sample_policy_actions(pseudo, data.contexts, rng)
    state = MatchingState(train, calibration, behavior_policy, pseudo, sampled, data.actions)
    logger.info(
        f"Split {data.n} records into {len(train)} train / {len(calibration)} calibration; "
        f"{len(state.train_matched)} / {len(state.calibration_matched)} matched"
    )
    return state


def copp_fit(
    data: BanditDataset,
    target: Policy,
    behavior: Optional[Policy] = None,
    split: SplitSpec = SplitSpec(),
    alpha: float = 0.1,
    rng: Optional[np.random.Generator] = None,
    forest_config: Optional[QuantileForestConfig] = None,
    penalized: bool = False,
    floor: float = POSITIVITY_FLOOR,
) -> CoppModel:
    """
    Fit conformal off-policy prediction on single-stage logged data.

    Args:
        data: Logged (X, T, Y) records
        target: Target policy pi_e
        behavior: Known behavior policy, or None to fit a logistic one on the
            training part
        split: Train/calibration split
        alpha: Miscoverage level
        rng: Generator for the pseudo-action draw and the forest
        forest_config: Quantile forest settings
        penalized: Fit the behavior policy with cross-validated ridge
        floor: Positivity floor applied to behavior masses before any ratio

    Returns:
        A fitted CoppModel; call it on a context to get a PredictionSet

    Raises:
        EmptyCalibrationError: no calibration record matched its pseudo action
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    state = prepare_matching(data, target, behavior, split, rng, penalized, floor)
    train_s, cal_s = state.train_matched, state.calibration_matched
    diagnostics = state.diagnostics()
    if len(cal_s) == 0:
        raise EmptyCalibrationError("no calibration record matched its pseudo action", diagnostics)

    return fit_weighted_cqr(
        data.contexts[train_s],
        data.outcomes[train_s],
        data.contexts[cal_s],
        data.outcomes[cal_s],
        state.pseudo.weights(data.contexts[cal_s]),
        state.pseudo.weights,
        alpha,
        rng,
        forest_config,
        diagnostics,
    )


def copp_predict(model: CoppModel, context: np.ndarray) -> PredictionSet:
    return model(context)


def _unit_weights(contexts: np.ndarray) -> np.ndarray:
    return np.ones(as_2d(contexts).shape[0])


def subsampling_method(
    data: BanditDataset,
    target: Policy,
    behavior: Optional[Policy] = None,
    split: SplitSpec = SplitSpec(),
    alpha: float = 0.1,
    rng: Optional[np.random.Generator] = None,
    forest_config: Optional[QuantileForestConfig] = None,
    penalized: bool = False,
) -> CoppModel:
    """
    Subsample on E ~ pi_e matches and run plain split CQR on them.

    Only valid when pi_e is deterministic or pi_b is uniform; kept as a
    comparator that shows the bias otherwise.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    state = prepare_matching(data, target, behavior, split, rng, penalized, sample_from_target=True)
    train_s, cal_s = state.train_matched, state.calibration_matched
    diagnostics = state.diagnostics()
    if len(cal_s) == 0:
        raise EmptyCalibrationError("no calibration record matched its target action", diagnostics)

    return fit_weighted_cqr(
        data.contexts[train_s],
        data.outcomes[train_s],
        data.contexts[cal_s],
        data.outcomes[cal_s],
        np.ones(len(cal_s)),
        _unit_weights,
        alpha,
        rng,
        forest_config,
        diagnostics,
    )


class ConditionalDensityModel(Protocol):
    """Per-arm conditional outcome densities f_t(y|x)."""

    num_actions: int

    def densities(self, contexts: np.ndarray, outcomes: np.ndarray) -> np.ndarray:
        """n×m matrix of f_t(outcomes[i] | contexts[i])."""
        ...


class FittedGaussianDensity:
    """
    Gaussian f_t(y|x) with forest-estimated mean and variance per arm.

    The mean comes from a forest on the arm's records; the variance from a
    second forest on the squared residuals.
    """

    def __init__(self, num_actions: int, forest_config: Optional[QuantileForestConfig] = None, min_variance: float = 1e-6):
        self.num_actions = num_actions
        self.forest_config = forest_config
        self.min_variance = min_variance
        self.mean_forests: List[QuantileForest] = []
        self.variance_forests: List[QuantileForest] = []

    def fit(self, data: BanditDataset, rng: np.random.Generator) -> "FittedGaussianDensity":
        self.mean_forests, self.variance_forests = [], []
        for arm in range(self.num_actions):
            rows = np.flatnonzero(data.actions == arm)
            features, outcomes = data.contexts[rows], data.outcomes[rows]
            mean_forest = QuantileForest(self.forest_config).fit(features, outcomes, rng)
            residuals = (outcomes - mean_forest.predict_mean(features)) ** 2
            variance_forest = QuantileForest(self.forest_config).fit(features, residuals, rng)
            self.mean_forests.append(mean_forest)
            self.variance_forests.append(variance_forest)
        return self

    def densities(self, contexts: np.ndarray, outcomes: np.ndarray) -> np.ndarray:
        contexts = as_2d(contexts)
        outcomes = np.asarray(outcomes, dtype=float).ravel()
        result = np.empty((len(outcomes), self.num_actions))
        for arm in range(self.num_actions):
            mean = self.mean_forests[arm].predict_mean(contexts)
            variance = np.maximum(self.variance_forests[arm].predict_mean(contexts), self.min_variance)
            result[:, arm] = norm.pdf(outcomes, loc=mean, scale=np.sqrt(variance))
        return result


class NoisyDensity:
    """
    A base density model with Uniform(0, 1) noise added to every per-arm density.

    The noise stream is keyed by the seed and the bytes of the query, so the
    same (contexts, outcomes) always gets the same noise.
    """

    def __init__(self, base: ConditionalDensityModel, seed: int = 0, scale: float = 1.0):
        self.base = base
        self.seed = int(seed)
        self.scale = scale
        self.num_actions = base.num_actions

    def _noise(self, contexts: np.ndarray, outcomes: np.ndarray, shape) -> np.ndarray:
        key = (
            zlib.crc32(np.ascontiguousarray(contexts).tobytes()),
            zlib.crc32(np.ascontiguousarray(outcomes).tobytes()),
        )
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=key)
        return np.random.default_rng(sequence).random(shape)

    def densities(self, contexts: np.ndarray, outcomes: np.ndarray) -> np.ndarray:
        contexts = as_2d(contexts)
        outcomes = np.asarray(outcomes, dtype=float).ravel()
        clean = self.base.densities(contexts, outcomes)
        return clean + self.scale * self._noise(contexts, outcomes, clean.shape)


def density_ratio_weights(
    target: Policy,
    behavior: Policy,
    density_model: ConditionalDensityModel,
    contexts: np.ndarray,
    outcomes: np.ndarray,
    floor: float = POSITIVITY_FLOOR,
) -> np.ndarray:
    """sum_t pi_e(t|x) f_t(y|x) / sum_t pi_b(t|x) f_t(y|x) for aligned (x, y) pairs."""
    densities = np.maximum(density_model.densities(contexts, outcomes), DENSITY_FLOOR)
    numerator = np.sum(target.probabilities(contexts) * densities, axis=1)
    denominator = np.sum(clip_probabilities(behavior.probabilities(contexts), floor) * densities, axis=1)
    return numerator / denominator


@dataclass
class DirectMethodModel:
    """Weighted split CQR whose test weight depends on the candidate outcome."""

    forest: QuantileForest
    cal_scores: np.ndarray
    cal_weights: np.ndarray
    target: Policy
    behavior: Policy
    density_model: ConditionalDensityModel
    alpha: float
    grid: np.ndarray
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def __call__(self, context: np.ndarray) -> PredictionSet:
        context = as_2d(context)
        q_lo, q_hi = self.forest.predict_interval(context, self.alpha / 2.0, 1.0 - self.alpha / 2.0)
        candidates = self.grid
        scores = cqr_score(candidates, q_lo[0], q_hi[0])
        repeated = np.repeat(context, len(candidates), axis=0)
        test_weights = density_ratio_weights(self.target, self.behavior, self.density_model, repeated, candidates)
        thresholds = weighted_quantiles(self.cal_scores, self.cal_weights, test_weights, 1.0 - self.alpha)
        covered = scores <= thresholds
        # cells meet at grid midpoints; the edge cells run past the grid
        boundaries = np.concatenate(([-np.inf], 0.5 * (candidates[:-1] + candidates[1:]), [np.inf]))
        return PredictionSet(tuple(zip(boundaries[:-1][covered], boundaries[1:][covered])))

    def predict_intervals(self, contexts: np.ndarray) -> SetBatch:
        return SetBatch(tuple(self(row) for row in as_2d(contexts)))


def direct_method(
    data: BanditDataset,
    target: Policy,
    behavior: Optional[Policy],
    density_model: ConditionalDensityModel,
    split: SplitSpec = SplitSpec(),
    alpha: float = 0.1,
    rng: Optional[np.random.Generator] = None,
    forest_config: Optional[QuantileForestConfig] = None,
    grid_size: int = DEFAULT_GRID_SIZE,
    floor: float = POSITIVITY_FLOOR,
) -> DirectMethodModel:
    """
    Weighted CP with w(x, y) = sum_t pi_e f_t(y|x) / sum_t pi_b f_t(y|x).

    Every calibration point keeps its own outcome-dependent weight. The test
    weight depends on the candidate outcome, so membership is resolved on a
    uniform grid of grid_size candidates spanning [min Y - R, max Y + R],
    R being the observed outcome range.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if grid_size < 2:
        raise InvalidInputError(f"grid_size must be >= 2, got {grid_size}")
    train, calibration = split_dataset(data, split)
    behavior_policy = resolve_behavior(data, train, behavior, rng)

    forest = QuantileForest(forest_config).fit(data.contexts[train], data.outcomes[train], rng)
    q_lo, q_hi = forest.predict_interval(data.contexts[calibration], alpha / 2.0, 1.0 - alpha / 2.0)
    scores = cqr_score(data.outcomes[calibration], q_lo, q_hi)
    weights = density_ratio_weights(
        target, behavior_policy, density_model, data.contexts[calibration], data.outcomes[calibration], floor
    )

    low, high = float(data.outcomes.min()), float(data.outcomes.max())
    spread = max(high - low, 1e-12)
    grid = np.linspace(low - spread, high + spread, grid_size)
    logger.info(f"Direct method calibrated on {len(calibration)} points, grid of {grid_size} outcomes")
    return DirectMethodModel(
        forest=forest,
        cal_scores=np.atleast_1d(scores),
        cal_weights=weights,
        target=target,
        behavior=behavior_policy,
        density_model=density_model,
        alpha=alpha,
        grid=grid,
        diagnostics={
            "n_train": int(len(train)),
            "n_cal": int(len(calibration)),
            "n_matched_cal": int(len(calibration)),
            "effective_sample_size": effective_sample_size(weights),
        },
    )
