"""
Synthetic benchmark scenarios with known truth.

  • Example 1: single stage, four uniform covariates, binary action,
    heteroscedastic Gaussian outcome
  • Example 2: two stages with a quadratic treatment effect per stage
  • Example 3: K-stage autoregressive state, outcome = final state

Every scenario exposes its behavior and target policies (over history
features for the multi-stage ones), generates logged data, and draws test
points (X, Y under the target policy) for coverage evaluation.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from core_types import BanditDataset, Policy, TrajectoryDataset, as_2d, sigmoid
from errors import InvalidInputError

logger = logging.getLogger(__name__)

HIGH_DIM = 100
TARGET_KINDS = ("stochastic", "deterministic")


@dataclass(frozen=True)
class ScenarioSpec:
    example: int = 1
    n: int = 2000
    high_dim: bool = False
    horizon: Optional[int] = None
    target: str = "stochastic"
    seed: int = 0

    def __post_init__(self):
        if self.example not in (1, 2, 3):
            raise InvalidInputError(f"example must be 1, 2 or 3, got {self.example}")
        if self.n < 1:
            raise InvalidInputError(f"n must be >= 1, got {self.n}")
        if self.target not in TARGET_KINDS:
            raise InvalidInputError(f"target must be one of {TARGET_KINDS}, got {self.target!r}")
        if self.target == "deterministic" and self.example != 1:
            raise InvalidInputError("the deterministic target is only defined for example 1")
        if self.example == 3:
            if self.high_dim:
                raise InvalidInputError("example 3 has no high-dimensional variant")
            if self.horizon not in (None, 3, 4, 5):
                raise InvalidInputError(f"example 3 horizon must be 3, 4 or 5, got {self.horizon}")
        elif self.horizon not in (None, self.default_horizon):
            raise InvalidInputError(f"example {self.example} has horizon {self.default_horizon}")

    @property
    def default_horizon(self) -> int:
        return {1: 1, 2: 2, 3: 3}[self.example]

    @property
    def resolved_horizon(self) -> int:
        return self.horizon or self.default_horizon

    def to_dict(self) -> Dict[str, Any]:
        return {
            "example": self.example,
            "n": self.n,
            "high_dim": self.high_dim,
            "horizon": self.resolved_horizon,
            "target": self.target,
            "seed": self.seed,
        }


# Example 1

def example1_arm_means(contexts: np.ndarray) -> np.ndarray:
    x = as_2d(contexts)
    base = 1.0 + x[:, 0] - x[:, 1] + x[:, 2] ** 3 + np.exp(x[:, 3])
    effect = 3.0 - 5.0 * x[:, 0] + 2.0 * x[:, 1] - 3.0 * x[:, 2] + x[:, 3]
    return np.column_stack([base, base + effect])


def example1_arm_scales(contexts: np.ndarray) -> np.ndarray:
    x = as_2d(contexts)
    level = 1.0 + x[:, :4].sum(axis=1)
    return np.column_stack([level, 2.0 * level])


def example1_outcome(contexts: np.ndarray, actions: np.ndarray, noise: np.ndarray) -> np.ndarray:
    rows = np.arange(as_2d(contexts).shape[0])
    actions = np.asarray(actions, dtype=np.int64)
    means = example1_arm_means(contexts)[rows, actions]
    scales = example1_arm_scales(contexts)[rows, actions]
    return means + scales * np.asarray(noise, dtype=float)


class Example1Density:
    """Exact per-arm Gaussian densities of Example 1."""

    num_actions = 2

    def densities(self, contexts: np.ndarray, outcomes: np.ndarray) -> np.ndarray:
        outcomes = np.asarray(outcomes, dtype=float).ravel()[:, None]
        return norm.pdf(outcomes, loc=example1_arm_means(contexts), scale=example1_arm_scales(contexts))


class Example1:
    num_actions = 2
    horizon = 1
    is_sequential = False

    def __init__(self, high_dim: bool = False, target: str = "stochastic"):
        if target not in TARGET_KINDS:
            raise InvalidInputError(f"target must be one of {TARGET_KINDS}, got {target!r}")
        self.high_dim = high_dim
        self.target = target
        self.dim = HIGH_DIM if high_dim else 4
        self.behavior_policy = Policy.binary(
            lambda x: sigmoid(-0.5 - 0.5 * x[:, :4].sum(axis=1)), name="example1-behavior", positive=True
        )
        if target == "stochastic":
            self.target_policy = Policy.binary(
                lambda x: sigmoid(-0.5 + x[:, 0] + x[:, 1] - x[:, 2] - x[:, 3]), name="example1-target"
            )
        else:
            self.target_policy = Policy.deterministic(
                lambda x: (x[:, 2] + x[:, 3] > x[:, 0] + x[:, 1]).astype(np.int64), 2, "example1-deterministic"
            )

    def sample_contexts(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.random((n, self.dim))

    def generate(self, n: int, rng: np.random.Generator) -> "SyntheticSample":
        contexts = self.sample_contexts(n, rng)
        actions = self.behavior_policy.sample(contexts, rng)
        noise = rng.standard_normal(n)
        potential = np.column_stack([example1_outcome(contexts, np.full(n, arm), noise) for arm in (0, 1)])
        data = BanditDataset(contexts, actions, potential[np.arange(n), actions], self.num_actions)
        return SyntheticSample(data, self, potential)

    def sample_test_points(self, n: int, rng: np.random.Generator):
        """(X, Y) with Y drawn under the target policy."""
        contexts = self.sample_contexts(n, rng)
        actions = self.target_policy.sample(contexts, rng)
        return contexts, example1_outcome(contexts, actions, rng.standard_normal(n))

    def oracle_density(self) -> Example1Density:
        return Example1Density()

    def oracle_quantiles(self, contexts: np.ndarray, levels: Sequence[float]) -> np.ndarray:
        return oracle_quantiles_example1(contexts, self.target_policy, levels)

    def truth_sidecar(self) -> Dict[str, Any]:
        return {
            "example": 1,
            "num_actions": self.num_actions,
            "dimension": self.dim,
            "null_features": self.dim - 4,
            "behavior": "P(T=1|X) = sigmoid(-0.5 - 0.5*(x0+x1+x2+x3))",
            "target": (
                "P(E=1|X) = sigmoid(-0.5 + x0 + x1 - x2 - x3)"
                if self.target == "stochastic"
                else "E = 1[x2 + x3 > x0 + x1]"
            ),
            "outcome": (
                "Y = 1 + x0 - x1 + x2^3 + exp(x3) + T*(3 - 5*x0 + 2*x1 - 3*x2 + x3)"
                " + (1 + T)*(1 + x0 + x1 + x2 + x3)*eps"
            ),
            "noise": "eps ~ N(0, 1)",
        }


def oracle_quantiles_example1(contexts: np.ndarray, target: Policy, levels: Sequence[float]) -> np.ndarray:
    """
    Quantiles of the target-policy outcome at each context.

    Given X = x the outcome is a two-component Gaussian mixture with weights
    pi_e(t|x); the mixture CDF is inverted by Brent's method to 1e-10.
    """
    contexts = as_2d(contexts)
    levels = np.asarray(levels, dtype=float).ravel()
    if np.any((levels <= 0) | (levels >= 1)):
        raise InvalidInputError("oracle quantile levels must lie in (0, 1)")
    weights = target.probabilities(contexts)
    means = example1_arm_means(contexts)
    scales = example1_arm_scales(contexts)

    result = np.empty((contexts.shape[0], len(levels)))
    for i in range(contexts.shape[0]):
        mix, mu, sigma = weights[i], means[i], scales[i]

        def cdf(y: float) -> float:
            return float(np.sum(mix * norm.cdf((y - mu) / sigma)))

        low = float(np.min(mu - 12.0 * sigma))
        high = float(np.max(mu + 12.0 * sigma))
        for j, level in enumerate(levels):
            result[i, j] = brentq(lambda y: cdf(y) - level, low, high, xtol=1e-10)
    return result


# Example 2

def example2_outcome(x1, t1, x2, t2, noise) -> np.ndarray:
    x1, t1, x2, t2, noise = (np.asarray(v, dtype=float) for v in (x1, t1, x2, t2, noise))
    mean = 1.0 + x1 + t1 * (1.0 - 3.0 * (x1 - 0.2) ** 2) + x2 + t2 * (1.0 - 5.0 * (x2 - 0.4) ** 2)
    return mean + example2_noise_multiplier(x1, t1, x2, t2) * noise


def example2_noise_multiplier(x1, t1, x2, t2) -> np.ndarray:
    """Signed noise multiplier; the conditional scale is its absolute value."""
    return 1.0 + 0.5 * t1 - t1 * x1 + 0.5 * t2 - t2 * x2


class Example2:
    num_actions = 2
    horizon = 2
    is_sequential = True

    def __init__(self, high_dim: bool = False):
        self.high_dim = high_dim
        self.first_dim = HIGH_DIM if high_dim else 1
        # Stage 1 history is X_1 (signal in column 0); stage 2 history ends with X_2
        self.behavior_policies = [
            Policy.binary(lambda h: sigmoid(-0.5 + h[:, 0]), name="example2-behavior-1", positive=True),
            Policy.binary(lambda h: sigmoid(-0.5 - h[:, -1]), name="example2-behavior-2", positive=True),
        ]
        self.target_policies = [
            Policy.binary(lambda h: sigmoid(0.5 * h[:, 0] - 0.5), name="example2-target-1"),
            Policy.binary(lambda h: sigmoid(0.5 * h[:, -1] - 1.0), name="example2-target-2"),
        ]

    @property
    def initial_dim(self) -> int:
        return self.first_dim

    def _roll_out(self, n: int, rng: np.random.Generator, policies: List[Policy]):
        x1 = rng.random((n, self.first_dim))
        t1 = policies[0].sample(x1, rng)
        x2 = x1[:, :1] + rng.random((n, 1))
        stage2 = TrajectoryDataset((x1, x2), np.column_stack([t1, np.zeros(n, dtype=np.int64)]), np.zeros(n))
        t2 = policies[1].sample(stage2.history_features(2), rng)
        noise = rng.standard_normal(n)
        outcome = example2_outcome(x1[:, 0], t1, x2[:, 0], t2, noise)
        return x1, x2, np.column_stack([t1, t2]), outcome

    def generate(self, n: int, rng: np.random.Generator) -> "SyntheticSample":
        x1, x2, actions, outcome = self._roll_out(n, rng, self.behavior_policies)
        return SyntheticSample(TrajectoryDataset((x1, x2), actions, outcome, self.num_actions), self)

    def sample_test_points(self, n: int, rng: np.random.Generator):
        """(X_1, Y) with every stage acting under the target policy."""
        x1, _, _, outcome = self._roll_out(n, rng, self.target_policies)
        return x1, outcome

    def truth_sidecar(self) -> Dict[str, Any]:
        return {
            "example": 2,
            "num_actions": self.num_actions,
            "horizon": 2,
            "stage_dimensions": [self.first_dim, 1],
            "null_features": self.first_dim - 1,
            "behavior": ["P(T1=1|X1) = sigmoid(-0.5 + X1)", "P(T2=1|H2) = sigmoid(-0.5 - X2)"],
            "target": ["P(E1=1|X1) = sigmoid(0.5*X1 - 0.5)", "P(E2=1|H2) = sigmoid(0.5*X2 - 1)"],
            "transition": "X2 ~ Uniform(X1, X1 + 1)",
            "outcome": (
                "Y = 1 + X1 + T1*(1 - 3*(X1 - 0.2)^2) + X2 + T2*(1 - 5*(X2 - 0.4)^2)"
                " + (1 + 0.5*T1 - T1*X1 + 0.5*T2 - T2*X2)*eps"
            ),
            "noise": "eps ~ N(0, 1)",
        }


# Example 3

def example3_step(previous_state, previous_action, noise) -> np.ndarray:
    """X_k = 0.5 X_{k-1} + 0.1 T_{k-1} + 0.5 eps_k."""
    return 0.5 * np.asarray(previous_state, dtype=float) + 0.1 * np.asarray(previous_action, dtype=float) + 0.5 * np.asarray(noise, dtype=float)


class Example3:
    num_actions = 2
    is_sequential = True
    initial_dim = 1

    def __init__(self, horizon: int = 3):
        if horizon not in (3, 4, 5):
            raise InvalidInputError(f"example 3 horizon must be 3, 4 or 5, got {horizon}")
        self.horizon = horizon
        self.behavior_policies = [
            Policy.binary(lambda h: sigmoid(-0.5 + h[:, -1]), name=f"example3-behavior-{k}", positive=True)
            for k in range(1, horizon + 1)
        ]
        self.target_policies = [
            Policy.binary(lambda h: sigmoid(-0.5 + 0.5 * h[:, -1]), name=f"example3-target-{k}")
            for k in range(1, horizon + 1)
        ]

    def _roll_out(self, n: int, rng: np.random.Generator, policies: List[Policy]):
        states = [0.5 * rng.standard_normal((n, 1))]
        actions = []
        for k in range(self.horizon):
            # Policies here read only the current state
            actions.append(policies[k].sample(states[k], rng))
            if k + 1 < self.horizon:
                states.append(example3_step(states[k], actions[k][:, None], rng.standard_normal((n, 1))))
        return states, np.column_stack(actions)

    def generate(self, n: int, rng: np.random.Generator) -> "SyntheticSample":
        states, actions = self._roll_out(n, rng, self.behavior_policies)
        rewards = np.column_stack([state[:, 0] for state in states])
        data = TrajectoryDataset(tuple(states), actions, states[-1][:, 0], self.num_actions, rewards)
        return SyntheticSample(data, self)

    def sample_test_points(self, n: int, rng: np.random.Generator):
        states, _ = self._roll_out(n, rng, self.target_policies)
        return states[0], states[-1][:, 0]

    def truth_sidecar(self) -> Dict[str, Any]:
        return {
            "example": 3,
            "num_actions": self.num_actions,
            "horizon": self.horizon,
            "initial_state": "X1 = 0.5*eps1",
            "transition": "Xk = 0.5*X(k-1) + 0.1*T(k-1) + 0.5*epsk",
            "behavior": "P(Tk=1|Xk) = sigmoid(-0.5 + Xk)",
            "target": "P(Dk=1|Xk) = sigmoid(-0.5 + 0.5*Xk)",
            "outcome": "Y = X_K (stage rewards Y_k = X_k)",
            "noise": "epsk ~ N(0, 1)",
        }


Scenario = Union[Example1, Example2, Example3]


@dataclass
class SyntheticSample:
    """Generated logged data, the scenario that produced it, and per-arm potential outcomes when known."""

    data: Union[BanditDataset, TrajectoryDataset]
    scenario: Scenario
    potential_outcomes: Optional[np.ndarray] = None


def make_scenario(spec: ScenarioSpec) -> Scenario:
    if spec.example == 1:
        return Example1(spec.high_dim, spec.target)
    if spec.example == 2:
        return Example2(spec.high_dim)
    return Example3(spec.resolved_horizon)


def generate_example1(
    n: int, high_dim: bool = False, rng: Optional[np.random.Generator] = None, target: str = "stochastic"
) -> SyntheticSample:
    rng = rng if rng is not None else np.random.default_rng(0)
    return Example1(high_dim, target).generate(n, rng)


def generate_example2(n: int, high_dim: bool = False, rng: Optional[np.random.Generator] = None) -> SyntheticSample:
    rng = rng if rng is not None else np.random.default_rng(0)
    return Example2(high_dim).generate(n, rng)


def generate_example3(n: int, horizon: int = 3, rng: Optional[np.random.Generator] = None) -> SyntheticSample:
    rng = rng if rng is not None else np.random.default_rng(0)
    return Example3(horizon).generate(n, rng)


def generate(spec: ScenarioSpec, rng: Optional[np.random.Generator] = None) -> SyntheticSample:
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    sample = make_scenario(spec).generate(spec.n, rng)
    logger.info(f"Generated example {spec.example} (n={spec.n}, high_dim={spec.high_dim})")
    return sample


def truth_sidecar(spec: ScenarioSpec) -> Dict[str, Any]:
    sidecar = make_scenario(spec).truth_sidecar()
    sidecar["spec"] = spec.to_dict()
    return sidecar
