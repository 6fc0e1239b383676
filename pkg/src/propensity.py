"""Behavior-policy fitting, the pseudo policy, and pseudo-action matching."""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Union

import numpy as np
from scipy.linalg import LinAlgError, solve
from scipy.special import log_softmax, softmax
from sklearn.model_selection import KFold

from core_types import (
    POSITIVITY_FLOOR,
    BanditDataset,
    Policy,
    PolicyKind,
    clip_probabilities,
    sample_actions,
)
from errors import DegenerateLabelsError, InternalError, InvalidInputError

logger = logging.getLogger(__name__)

DEFAULT_RIDGE_GRID = np.logspace(-4, 2, 10)


@dataclass
class LogisticModel:
    """
    Multinomial logistic regression with action 0 as the reference class.

    coefficients is (m-1)×(d+1) with the intercept in column 0, so the binary
    case is a single row (intercept, slopes).
    """

    coefficients: np.ndarray
    num_actions: int
    ridge_lambda: float = 0.0
    converged: bool = True
    max_iterations_reached: bool = False
    iterations: int = 0
    cv_scores: Dict[float, float] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.coefficients.shape[1] - 1

    def logits(self, features: np.ndarray) -> np.ndarray:
        features = _as_features(features, self.dim)
        design = np.hstack([np.ones((features.shape[0], 1)), features])
        return np.hstack([np.zeros((features.shape[0], 1)), design @ self.coefficients.T])

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return softmax(self.logits(features), axis=1)

    def as_policy(self, name: str = "fitted-behavior") -> Policy:
        return Policy(self.predict_proba, self.num_actions, PolicyKind.FITTED_LOGISTIC, name)

    def to_json(self) -> str:
        return json.dumps(
            {
                "coefficients": self.coefficients.tolist(),
                "num_actions": self.num_actions,
                "ridge_lambda": self.ridge_lambda,
                "converged": self.converged,
                "max_iterations_reached": self.max_iterations_reached,
                "iterations": self.iterations,
                "cv_scores": [[lam, score] for lam, score in self.cv_scores.items()],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "LogisticModel":
        payload = json.loads(text)
        return cls(
            coefficients=np.asarray(payload["coefficients"], dtype=float),
            num_actions=int(payload["num_actions"]),
            ridge_lambda=float(payload["ridge_lambda"]),
            converged=bool(payload.get("converged", True)),
            max_iterations_reached=bool(payload.get("max_iterations_reached", False)),
            iterations=int(payload.get("iterations", 0)),
            cv_scores={float(lam): float(score) for lam, score in payload.get("cv_scores", [])},
        )


def _as_features(features, dim: Optional[int] = None) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features.reshape(-1, 1) if dim in (None, 1) else features.reshape(1, -1)
    if dim is not None and features.shape[1] != dim:
        raise InvalidInputError(f"expected {dim} features, got {features.shape[1]}")
    return features


def _penalized_loglik(design, onehot, beta, penalty) -> float:
    full = np.hstack([np.zeros((design.shape[0], 1)), design @ beta.T])
    loglik = np.sum(log_softmax(full, axis=1) * onehot)
    return float(loglik - 0.5 * np.sum(penalty * beta**2))


def fit_logistic(
    features,
    labels,
    ridge_lambda: float = 0.0,
    num_actions: Optional[int] = None,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> LogisticModel:
    """
    Fit a (ridge-penalized) multinomial logistic regression by Newton / IRLS.

    Args:
        features: n×d real matrix (d may be 0 for an intercept-only fit)
        labels: n integer labels in 0..m-1
        ridge_lambda: L2 penalty on the slopes; the intercept is never penalized
        num_actions: m; inferred from the labels when omitted
        max_iter: Newton iteration cap
        tol: stop once the largest coefficient change drops below this

    Returns:
        The fitted LogisticModel. When the cap is hit (e.g. perfectly separated
        data without a penalty) the model comes back flagged, not raised.
    """
    features = _as_features(features)
    labels = np.asarray(labels)
    if ridge_lambda < 0:
        raise InvalidInputError(f"ridge_lambda must be non-negative, got {ridge_lambda}")
    if features.shape[0] != labels.shape[0]:
        raise InvalidInputError("features and labels differ in length")
    if not np.all(np.isfinite(features)):
        raise InvalidInputError("features contain non-finite values")
    labels = labels.astype(np.int64)
    if num_actions is None:
        num_actions = max(2, int(labels.max()) + 1)
    if labels.min() < 0 or labels.max() >= num_actions:
        raise InvalidInputError(f"labels must lie in 0..{num_actions - 1}")
    if len(np.unique(labels)) < 2:
        raise DegenerateLabelsError(f"labels hold a single class ({labels[0]}); nothing to fit")

    n, d = features.shape
    design = np.hstack([np.ones((n, 1)), features])
    onehot = np.zeros((n, num_actions))
    onehot[np.arange(n), labels] = 1.0
    targets = onehot[:, 1:]

    n_classes = num_actions - 1
    n_params = d + 1
    beta = np.zeros((n_classes, n_params))
    penalty = np.full((n_classes, n_params), ridge_lambda)
    penalty[:, 0] = 0.0

    objective = _penalized_loglik(design, onehot, beta, penalty)
    converged = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        full = np.hstack([np.zeros((n, 1)), design @ beta.T])
        probs = softmax(full, axis=1)[:, 1:]
        gradient = (targets - probs).T @ design - penalty * beta

        # Negative Hessian of the penalized log-likelihood, block (j, k)
        hessian = np.zeros((n_classes * n_params, n_classes * n_params))
        for j in range(n_classes):
            for k in range(j, n_classes):
                curvature = probs[:, j] * ((j == k) - probs[:, k])
                block = design.T @ (design * curvature[:, None])
                hessian[j * n_params:(j + 1) * n_params, k * n_params:(k + 1) * n_params] = block
                hessian[k * n_params:(k + 1) * n_params, j * n_params:(j + 1) * n_params] = block.T
        hessian += np.diag(penalty.ravel())

        try:
            step = solve(hessian, gradient.ravel(), assume_a="pos")
        except (LinAlgError, ValueError):
            step = np.linalg.lstsq(hessian, gradient.ravel(), rcond=None)[0]
        step = step.reshape(n_classes, n_params)

        # Step halving keeps every iterate an ascent step
        scale = 1.0
        candidate = beta + step
        candidate_objective = _penalized_loglik(design, onehot, candidate, penalty)
        while candidate_objective < objective and scale > 1e-10:
            scale *= 0.5
            candidate = beta + scale * step
            candidate_objective = _penalized_loglik(design, onehot, candidate, penalty)

        change = float(np.max(np.abs(candidate - beta)))
        beta, objective = candidate, max(candidate_objective, objective)
        if change < tol:
            converged = True
            break

    if not converged:
        logger.warning(
            f"Logistic fit hit {max_iter} iterations without converging (lambda={ridge_lambda}); "
            "the data may be separable"
        )
    return LogisticModel(
        coefficients=beta,
        num_actions=num_actions,
        ridge_lambda=float(ridge_lambda),
        converged=converged,
        max_iterations_reached=not converged,
        iterations=iteration,
    )


def fit_penalized_logistic(
    features,
    labels,
    rng: np.random.Generator,
    grid: Optional[Sequence[float]] = None,
    folds: int = 5,
    num_actions: Optional[int] = None,
) -> LogisticModel:
    """
    Ridge logistic regression with lambda picked by k-fold cross-validated log-likelihood.

    Args:
        features: n×d real matrix
        labels: n integer labels
        rng: Generator used to shuffle the folds
        grid: Candidate lambdas (defaults to 10 log-spaced values in [1e-4, 1e2])
        folds: Number of cross-validation folds

    Returns:
        The model refitted on all rows with the best lambda; per-lambda mean
        held-out log-likelihoods are kept on model.cv_scores.
    """
    features = _as_features(features)
    labels = np.asarray(labels, dtype=np.int64)
    if num_actions is None:
        num_actions = max(2, int(labels.max()) + 1)
    grid = DEFAULT_RIDGE_GRID if grid is None else np.asarray(grid, dtype=float)

    splitter = KFold(n_splits=folds, shuffle=True, random_state=int(rng.integers(2**31 - 1)))
    fold_indices = list(splitter.split(features))

    cv_scores: Dict[float, float] = {}
    for ridge_lambda in grid:
        held_out = []
        for train_rows, test_rows in fold_indices:
            try:
                model = fit_logistic(
                    features[train_rows], labels[train_rows], ridge_lambda, num_actions, max_iter=50
                )
            except DegenerateLabelsError:
                continue
            probs = clip_probabilities(model.predict_proba(features[test_rows]))
            held_out.append(np.mean(np.log(probs[np.arange(len(test_rows)), labels[test_rows]])))
        cv_scores[float(ridge_lambda)] = float(np.mean(held_out)) if held_out else -np.inf

    best_lambda = max(cv_scores, key=lambda lam: cv_scores[lam])
    logger.info(f"Cross-validated ridge lambda: {best_lambda:.4g} over {len(grid)} candidates")
    model = fit_logistic(features, labels, best_lambda, num_actions)
    model.cv_scores = cv_scores
    return model


class PseudoPolicy:
    """
    The pseudo policy pi_a(t|x) proportional to pi_e(t|x) / pi_b(t|x).

    Behavior masses are clipped to [floor, 1-floor] before any ratio is
    formed, so estimation noise never produces infinite weights.
    """

    def __init__(self, target: Policy, behavior: Policy, floor: float = POSITIVITY_FLOOR):
        if target.num_actions != behavior.num_actions:
            raise InvalidInputError(
                f"target has {target.num_actions} actions but behavior has {behavior.num_actions}"
            )
        self.target = target
        self.behavior = behavior
        self.floor = floor
        self.num_actions = target.num_actions

    def ratios(self, contexts: np.ndarray) -> np.ndarray:
        target_probs = self.target.probabilities(contexts)
        behavior_probs = clip_probabilities(self.behavior.probabilities(contexts), self.floor)
        return target_probs / behavior_probs

    def probabilities(self, contexts: np.ndarray) -> np.ndarray:
        ratios = self.ratios(contexts)
        totals = ratios.sum(axis=1, keepdims=True)
        if np.any(totals <= 0):
            raise InternalError("pseudo-policy normalizer vanished; behavior clipping failed")
        return ratios / totals

    def weights(self, contexts: np.ndarray) -> np.ndarray:
        """sum_t pi_e(t|x) / pi_b(t|x), which equals 1 / P(A = T | X = x)."""
        return self.ratios(contexts).sum(axis=1)

    def match_probability(self, contexts: np.ndarray) -> np.ndarray:
        return 1.0 / self.weights(contexts)

    def as_policy(self) -> Policy:
        return Policy(self.probabilities, self.num_actions, PolicyKind.PSEUDO, f"pseudo({self.target.name})")


def make_pseudo_policy(target: Policy, behavior: Policy, floor: float = POSITIVITY_FLOOR) -> PseudoPolicy:
    return PseudoPolicy(target, behavior, floor)


def sample_policy_actions(
    policy: Union[PseudoPolicy, Policy], contexts: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Draw one action per row from any policy, pseudo (A) or target (E)."""
    return sample_actions(policy.probabilities(contexts), rng)


def sample_pseudo_actions(policy: PseudoPolicy, contexts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw A_i ~ pi_a(.|X_i) independently, one uniform per row."""
    return sample_policy_actions(policy, contexts, rng)


def select_matched(data: Union[BanditDataset, np.ndarray], pseudo_actions: np.ndarray) -> np.ndarray:
    """Indices i with A_i == T_i."""
    actions = data.actions if isinstance(data, BanditDataset) else np.asarray(data)
    pseudo_actions = np.asarray(pseudo_actions)
    if actions.shape != pseudo_actions.shape:
        raise InvalidInputError("observed and pseudo actions are not aligned")
    if actions.ndim == 2:
        matched = np.flatnonzero(np.all(actions == pseudo_actions, axis=1))
    else:
        matched = np.flatnonzero(actions == pseudo_actions)
    if len(matched) == 0:
        logger.warning(f"No pseudo action matched the logged action among {len(actions)} records")
    return matched


@dataclass
class MixtureCheck:
    """Arm shares among matched records against their predicted values."""

    empirical: np.ndarray
    expected: np.ndarray
    target: np.ndarray
    standard_errors: np.ndarray
    n_matched: int

    def z_scores(self, reference: Optional[np.ndarray] = None) -> np.ndarray:
        reference = self.target if reference is None else reference
        with np.errstate(divide="ignore", invalid="ignore"):
            return (self.empirical - reference) / self.standard_errors


def matched_outcome_mixture_check(
    target: Policy,
    behavior: Policy,
    contexts: np.ndarray,
    actions: np.ndarray,
    sampled_actions: np.ndarray,
    sampling_policy: Optional[Union[PseudoPolicy, Policy]] = None,
) -> MixtureCheck:
    """
    Compare arm shares among matched records with the mixture they should follow.

    Among records whose sampled action equals the logged one, arm t appears
    with probability pi_s(t|x)pi_b(t|x) / sum_t' pi_s(t'|x)pi_b(t'|x), where
    pi_s is the policy the sampled actions came from (the pseudo policy by
    default). Under pseudo sampling this equals pi_e(t|x).

    Args:
        target: Target policy pi_e
        behavior: True behavior policy that produced `actions`
        contexts: Contexts of the records (a single stratum for a sharp check)
        actions: Logged actions T
        sampled_actions: Pseudo (A) or target (E) actions drawn for the records
        sampling_policy: Policy the sampled actions were drawn from

    Returns:
        MixtureCheck with empirical and predicted arm shares
    """
    if sampling_policy is None:
        sampling_policy = PseudoPolicy(target, behavior)
    matched = select_matched(np.asarray(actions), sampled_actions)
    m = target.num_actions

    sampling_probs = sampling_policy.probabilities(contexts)
    behavior_probs = behavior.probabilities(contexts)
    joint = sampling_probs * behavior_probs
    expected = joint.sum(axis=0) / joint.sum()

    match_probs = joint.sum(axis=1)
    target_probs = target.probabilities(contexts)
    target_share = (match_probs[:, None] * target_probs).sum(axis=0) / match_probs.sum()

    n_matched = len(matched)
    if n_matched:
        empirical = np.bincount(np.asarray(actions)[matched], minlength=m) / n_matched
    else:
        empirical = np.full(m, np.nan)
    standard_errors = np.sqrt(target_share * (1.0 - target_share) / max(n_matched, 1))
    return MixtureCheck(empirical, expected, target_share, standard_errors, n_matched)
