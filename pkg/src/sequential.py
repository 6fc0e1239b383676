"""
Multi-stage COPP.

Stage-wise behavior models are fitted on flattened histories H_k, pseudo
actions are drawn stage by stage at the observed histories, and only
trajectories whose whole pseudo sequence matches the logged one are kept.
A classifier on the initial state X_1 turns the match probability into the
conformal weight, so calibration and prediction work on X_1 alone.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from core_types import (
    POSITIVITY_FLOOR,
    Policy,
    PredictionSet,
    SplitSpec,
    TrajectoryDataset,
    as_2d,
    split_dataset,
)
from conformal import CoppModel, fit_weighted_cqr
from errors import DegenerateLabelsError, EmptyCalibrationError, InvalidDatasetError, InvalidInputError
from extensions import WEIGHT_RULES, MultiSplitConfig, MultiSplitModel
from propensity import LogisticModel, PseudoPolicy, fit_logistic, fit_penalized_logistic, sample_policy_actions
from quantile_forest import QuantileForestConfig

logger = logging.getLogger(__name__)


@dataclass
class StagePolicySet:
    """One behavior policy per stage, each over that stage's history features."""

    policies: List[Policy]
    models: List[Optional[LogisticModel]] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return len(self.policies)

    def policy(self, stage: int) -> Policy:
        return self.policies[stage - 1]

    def probabilities(self, data: TrajectoryDataset, stage: int) -> np.ndarray:
        return self.policy(stage).probabilities(data.history_features(stage))


def fit_stage_policies(
    data: TrajectoryDataset,
    train: Optional[np.ndarray] = None,
    penalized: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> StagePolicySet:
    """
    Fit pi_b,k(t_k | h_k) for every stage by logistic regression on H_k.

    Raises:
        DegenerateLabelsError: a stage saw a single action in training; the
            error's `stage` tells which one
    """
    train = np.arange(data.n) if train is None else np.asarray(train)
    rng = rng if rng is not None else np.random.default_rng(0)
    policies, models = [], []
    for stage in range(1, data.horizon + 1):
        features = data.history_features(stage)[train]
        labels = data.stage_actions[train, stage - 1]
        try:
            if penalized:
                model = fit_penalized_logistic(features, labels, rng, num_actions=data.num_actions)
            else:
                model = fit_logistic(features, labels, num_actions=data.num_actions)
        except DegenerateLabelsError as error:
            raise DegenerateLabelsError(f"stage {stage}: {error}", stage=stage) from error
        models.append(model)
        policies.append(model.as_policy(f"fitted-behavior-stage-{stage}"))
    return StagePolicySet(policies, models)


def stage_pseudo_policies(
    behaviors: StagePolicySet, targets: Sequence[Policy], floor: float = POSITIVITY_FLOOR
) -> List[PseudoPolicy]:
    if len(targets) != behaviors.horizon:
        raise InvalidInputError(f"{len(targets)} target stage policies for horizon {behaviors.horizon}")
    return [PseudoPolicy(target, behaviors.policy(k), floor) for k, target in enumerate(targets, start=1)]


def sample_trajectory_pseudo_actions(
    behaviors: StagePolicySet,
    targets: Sequence[Policy],
    data: TrajectoryDataset,
    rng: np.random.Generator,
    floor: float = POSITIVITY_FLOOR,
) -> np.ndarray:
    """n×K pseudo actions, stage k drawn from pi_a,k at the observed history H_k."""
    pseudo = stage_pseudo_policies(behaviors, targets, floor)
    return _draw_stagewise(pseudo, data, rng)


def _draw_stagewise(policies: Sequence, data: TrajectoryDataset, rng: np.random.Generator) -> np.ndarray:
    sampled = np.empty((data.n, data.horizon), dtype=np.int64)
    for stage, policy in enumerate(policies, start=1):
        sampled[:, stage - 1] = sample_policy_actions(policy, data.history_features(stage), rng)
    return sampled


@dataclass
class MatchWeightModel:
    """
    w(x_1) = 1 / P(full pseudo match | X_1 = x_1).

    For K >= 2 the match probability comes from a logistic classifier on X_1,
    clipped to [floor, 1]. A horizon-1 model uses the exact sum_t pi_e / pi_b
    of its stage pseudo policy instead.
    """

    classifier: Optional[LogisticModel] = None
    pseudo: Optional[PseudoPolicy] = None
    constant: Optional[float] = None
    floor: float = POSITIVITY_FLOOR

    def match_probability(self, initial_states: np.ndarray) -> np.ndarray:
        initial_states = as_2d(initial_states)
        if self.pseudo is not None:
            return self.pseudo.match_probability(initial_states)
        if self.classifier is not None:
            probability = self.classifier.predict_proba(initial_states)[:, 1]
        else:
            probability = np.full(initial_states.shape[0], self.constant)
        return np.clip(probability, self.floor, 1.0)

    def weights(self, initial_states: np.ndarray) -> np.ndarray:
        initial_states = as_2d(initial_states)
        if self.pseudo is not None:
            return self.pseudo.weights(initial_states)
        return 1.0 / self.match_probability(initial_states)


def fit_match_weight_model(
    initial_states: np.ndarray,
    matched: np.ndarray,
    rng: np.random.Generator,
    penalized: bool = False,
    floor: float = POSITIVITY_FLOOR,
) -> MatchWeightModel:
    labels = np.asarray(matched, dtype=np.int64)
    if labels.min() == labels.max():
        # All or nothing matched: the match probability is that constant
        return MatchWeightModel(constant=float(labels[0]), floor=floor)
    if penalized:
        classifier = fit_penalized_logistic(initial_states, labels, rng, num_actions=2)
    else:
        classifier = fit_logistic(initial_states, labels, num_actions=2)
    return MatchWeightModel(classifier=classifier, floor=floor)


@dataclass
class TrajectoryMatching:
    train: np.ndarray
    calibration: np.ndarray
    behaviors: Optional[StagePolicySet]
    pseudo: List[PseudoPolicy]
    sampled_actions: np.ndarray
    full_match: np.ndarray
    match_weights: Optional[MatchWeightModel]

    @property
    def train_matched(self) -> np.ndarray:
        return self.train[self.full_match[self.train]]

    @property
    def calibration_matched(self) -> np.ndarray:
        return self.calibration[self.full_match[self.calibration]]

    def diagnostics(self, data: TrajectoryDataset) -> Dict[str, Any]:
        stage_rates = np.mean(self.sampled_actions == data.stage_actions, axis=0)
        return {
            "n_train": int(len(self.train)),
            "n_cal": int(len(self.calibration)),
            "n_matched_train": int(len(self.train_matched)),
            "n_matched_cal": int(len(self.calibration_matched)),
            "match_rate": float(np.mean(self.full_match)),
            "stage_match_rates": [float(rate) for rate in stage_rates],
        }


def _resolve_stage_behaviors(
    data: TrajectoryDataset,
    train: np.ndarray,
    behaviors: Optional[Sequence[Policy]],
    rng: np.random.Generator,
    penalized: bool,
) -> StagePolicySet:
    if behaviors is None:
        return fit_stage_policies(data, train, penalized, rng)
    if len(behaviors) != data.horizon:
        raise InvalidInputError(f"{len(behaviors)} behavior stage policies for horizon {data.horizon}")
    return StagePolicySet(list(behaviors))


def prepare_trajectory_matching(
    data: TrajectoryDataset,
    targets: Sequence[Policy],
    behaviors: Optional[Sequence[Policy]],
    split: SplitSpec,
    rng: np.random.Generator,
    penalized: bool = False,
    floor: float = POSITIVITY_FLOOR,
    sample_from_target: bool = False,
) -> TrajectoryMatching:
    """
    Split, fit stage policies, draw pseudo trajectories, and fit the match-weight model.

    With sample_from_target the actions come from the targets directly and
    no behavior or match-weight model is fitted.
    """
    train, calibration = split_dataset(data, split)
    if sample_from_target:
        if len(targets) != data.horizon:
            raise InvalidInputError(f"{len(targets)} target stage policies for horizon {data.horizon}")
        sampled = _draw_stagewise(list(targets), data, rng)
        full_match = np.all(sampled == data.stage_actions, axis=1)
        state = TrajectoryMatching(train, calibration, None, [], sampled, full_match, None)
        logger.info(
            f"K={data.horizon}: {len(state.calibration_matched)}/{len(calibration)} calibration "
            f"trajectories matched their target actions"
        )
        return state

    stage_behaviors = _resolve_stage_behaviors(data, train, behaviors, rng, penalized)
    pseudo = stage_pseudo_policies(stage_behaviors, targets, floor)
    sampled = _draw_stagewise(pseudo, data, rng)
    full_match = np.all(sampled == data.stage_actions, axis=1)

    if data.horizon == 1:
        match_weights = MatchWeightModel(pseudo=pseudo[0], floor=floor)
    else:
        match_weights = fit_match_weight_model(
            data.initial_states[train], full_match[train], rng, penalized, floor
        )

    state = TrajectoryMatching(train, calibration, stage_behaviors, pseudo, sampled, full_match, match_weights)
    logger.info(
        f"K={data.horizon}: {len(state.train_matched)}/{len(train)} train and "
        f"{len(state.calibration_matched)}/{len(calibration)} calibration trajectories fully matched"
    )
    return state


def sequential_copp_fit(
    data: TrajectoryDataset,
    targets: Sequence[Policy],
    behaviors: Optional[Sequence[Policy]] = None,
    split: SplitSpec = SplitSpec(),
    alpha: float = 0.1,
    rng: Optional[np.random.Generator] = None,
    forest_config: Optional[QuantileForestConfig] = None,
    penalized: bool = False,
    floor: float = POSITIVITY_FLOOR,
    importance_sampling: bool = False,
    weight_rule: str = "pseudo",
) -> CoppModel:
    """
    Fit sequential COPP on trajectories; the returned model takes initial states X_1.

    Args:
        data: Logged trajectories
        targets: Target policy per stage, each over that stage's history features
        behaviors: Known behavior policy per stage, or None to fit them
        split: Train/calibration split
        alpha: Miscoverage level
        rng: Generator for stage fits, pseudo draws and the forest
        forest_config: Quantile forest settings
        penalized: Cross-validated ridge for the stage and match-weight fits
        floor: Positivity floor for behavior masses
        importance_sampling: Weight every calibration trajectory by
            prod_k pi_a,k(T_k|H_k)·w(X_1) instead of keeping only full matches
        weight_rule: "pseudo" or "indicator" (the latter reproduces plain
            sequential COPP under importance_sampling)

    Raises:
        EmptyCalibrationError: no calibration trajectory fully matched
            (diagnostics carry the per-stage match rates)
    """
    if weight_rule not in WEIGHT_RULES:
        raise InvalidInputError(f"weight_rule must be one of {WEIGHT_RULES}, got {weight_rule!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    state = prepare_trajectory_matching(data, targets, behaviors, split, rng, penalized, floor)
    diagnostics = state.diagnostics(data)
    train_s = state.train_matched
    initial = data.initial_states

    if importance_sampling:
        calibration = state.calibration
        if weight_rule == "pseudo":
            mass = np.ones(len(calibration))
            for stage, pseudo in enumerate(state.pseudo, start=1):
                probs = pseudo.probabilities(data.history_features(stage)[calibration])
                mass *= probs[np.arange(len(calibration)), data.stage_actions[calibration, stage - 1]]
        else:
            mass = state.full_match[calibration].astype(float)
        weights = mass * state.match_weights.weights(initial[calibration])
    else:
        calibration = state.calibration_matched
        if len(calibration) == 0:
            raise EmptyCalibrationError(
                f"no calibration trajectory fully matched (stage match rates "
                f"{diagnostics['stage_match_rates']})",
                diagnostics,
            )
        weights = state.match_weights.weights(initial[calibration])

    return fit_weighted_cqr(
        initial[train_s],
        data.outcomes[train_s],
        initial[calibration],
        data.outcomes[calibration],
        weights,
        state.match_weights.weights,
        alpha,
        rng,
        forest_config,
        diagnostics,
    )


def sequential_copp_predict(
    data: TrajectoryDataset,
    targets: Sequence[Policy],
    behaviors: Optional[Sequence[Policy]],
    split: SplitSpec,
    alpha: float,
    rng: np.random.Generator,
    x1_new: np.ndarray,
    **kwargs,
) -> PredictionSet:
    return sequential_copp_fit(data, targets, behaviors, split, alpha, rng, **kwargs)(x1_new)


def sequential_copp_is_fit(data: TrajectoryDataset, targets: Sequence[Policy], **kwargs) -> CoppModel:
    return sequential_copp_fit(data, targets, importance_sampling=True, **kwargs)


def sequential_copp_is_predict(
    data: TrajectoryDataset, targets: Sequence[Policy], x1_new: np.ndarray, **kwargs
) -> PredictionSet:
    return sequential_copp_is_fit(data, targets, **kwargs)(x1_new)


def sequential_subsampling_method(
    data: TrajectoryDataset,
    targets: Sequence[Policy],
    behaviors: Optional[Sequence[Policy]] = None,
    split: SplitSpec = SplitSpec(),
    alpha: float = 0.1,
    rng: Optional[np.random.Generator] = None,
    forest_config: Optional[QuantileForestConfig] = None,
    penalized: bool = False,
) -> CoppModel:
    """E_k ~ pi_e,k at every stage, unweighted split CQR on full matches."""
    rng = rng if rng is not None else np.random.default_rng(0)
    state = prepare_trajectory_matching(
        data, targets, behaviors, split, rng, penalized, sample_from_target=True
    )
    diagnostics = state.diagnostics(data)
    train_s, cal_s = state.train_matched, state.calibration_matched
    if len(cal_s) == 0:
        raise EmptyCalibrationError("no calibration trajectory matched its target actions", diagnostics)
    initial = data.initial_states
    return fit_weighted_cqr(
        initial[train_s],
        data.outcomes[train_s],
        initial[cal_s],
        data.outcomes[cal_s],
        np.ones(len(cal_s)),
        lambda states: np.ones(as_2d(states).shape[0]),
        alpha,
        rng,
        forest_config,
        diagnostics,
    )


def sequential_copp_ms_fit(
    data: TrajectoryDataset,
    targets: Sequence[Policy],
    behaviors: Optional[Sequence[Policy]] = None,
    config: MultiSplitConfig = MultiSplitConfig(),
    alpha: float = 0.1,
    rng: Optional[np.random.Generator] = None,
    forest_config: Optional[QuantileForestConfig] = None,
    penalized: bool = False,
) -> MultiSplitModel:
    """Sequential COPP-MS (or COPP-IS-MS) through the shared multi-split aggregator."""
    rng = rng if rng is not None else np.random.default_rng(0)

    def fit_one(split: SplitSpec, rep_rng: np.random.Generator, split_alpha: float):
        return sequential_copp_fit(
            data,
            targets,
            behaviors,
            split,
            split_alpha,
            rep_rng,
            forest_config,
            penalized,
            importance_sampling=config.importance_sampling,
        )

    return MultiSplitModel.fit(fit_one, config, alpha, rng)


def per_stage_copp(
    data: TrajectoryDataset,
    targets: Sequence[Policy],
    behaviors: Optional[Sequence[Policy]] = None,
    split: SplitSpec = SplitSpec(),
    alpha: float = 0.1,
    rng: Optional[np.random.Generator] = None,
    forest_config: Optional[QuantileForestConfig] = None,
) -> List[CoppModel]:
    """
    Immediate-reward setting: one sequential COPP model per stage reward Y_k.

    Model k is fitted on the first k stages with Y_k as the outcome. The
    intervals are per stage; nothing here combines them into an interval for
    the cumulative reward.
    """
    if data.stage_rewards is None:
        raise InvalidDatasetError("per-stage COPP needs stage_rewards on the dataset")
    rng = rng if rng is not None else np.random.default_rng(0)
    models = []
    for stage in range(1, data.horizon + 1):
        truncated = data.truncate(stage)
        stage_behaviors = None if behaviors is None else list(behaviors)[:stage]
        models.append(
            sequential_copp_fit(
                truncated, list(targets)[:stage], stage_behaviors, split, alpha, rng, forest_config
            )
        )
    return models
