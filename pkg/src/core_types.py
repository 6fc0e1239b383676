"""
Shared data model for the COPP toolkit.

  • BanditDataset / TrajectoryDataset: logged (context, action, outcome)
    records, single-stage and K-stage
  • Policy: probability mass over m discrete actions given a context
    (or a flattened history for stage policies)
  • PredictionSet / IntervalBatch: the sets every method returns
  • SplitSpec + split_dataset: the reproducible train/calibration split
  • derive_rng: one Generator per (master seed, replicate, purpose)

All containers are frozen and their arrays read-only once built.
"""

import logging
import re
import zlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit

from errors import InvalidDatasetError, InvalidInputError

logger = logging.getLogger(__name__)

POSITIVITY_FLOOR = 1e-6
MASS_TOLERANCE = 1e-9
QUANTILE_TOLERANCE = 1e-12
CSV_FLOAT_FORMAT = "%.17g"


def sigmoid(t):
    """exp(t) / (1 + exp(t)), evaluated without overflow for any finite t."""
    return expit(t)


def derive_rng(master_seed: int, replicate: int = 0, purpose: str = "") -> np.random.Generator:
    """
    Build an independent generator for one (replicate, purpose) pair.

    Streams only depend on their key, so replicates can be scheduled in any
    order or in parallel and still draw the same numbers.

    Args:
        master_seed: Non-negative experiment seed
        replicate: Replicate (or repetition) index
        purpose: Short tag such as "data", "test" or "COPP"

    Returns:
        A numpy Generator seeded from the derived SeedSequence
    """
    if master_seed < 0 or replicate < 0:
        raise InvalidInputError("seeds and replicate indices must be non-negative")
    tag = zlib.crc32(purpose.encode("utf-8"))
    sequence = np.random.SeedSequence(entropy=master_seed, spawn_key=(replicate, tag))
    return np.random.default_rng(sequence)


def clip_probabilities(probabilities: np.ndarray, floor: float = POSITIVITY_FLOOR) -> np.ndarray:
    return np.clip(probabilities, floor, 1.0 - floor)


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def _as_actions(actions, num_actions: int, name: str = "actions") -> np.ndarray:
    raw = np.asarray(actions)
    if raw.size and not np.all(np.isfinite(raw.astype(float))):
        raise InvalidDatasetError(f"{name} contain non-finite entries")
    as_int = np.array(raw, dtype=np.int64)
    if raw.size and not np.array_equal(as_int, raw.astype(float)):
        raise InvalidDatasetError(f"{name} must be integers")
    if as_int.size and (as_int.min() < 0 or as_int.max() >= num_actions):
        raise InvalidDatasetError(f"{name} must lie in 0..{num_actions - 1}")
    return as_int


@dataclass(frozen=True)
class BanditDataset:
    """Single-stage logged data: contexts X (n×d), actions T, outcomes Y."""

    contexts: np.ndarray
    actions: np.ndarray
    outcomes: np.ndarray
    num_actions: int = 2

    def __post_init__(self):
        if self.num_actions < 2:
            raise InvalidDatasetError(f"num_actions must be >= 2, got {self.num_actions}")

        contexts = np.array(self.contexts, dtype=float)
        if contexts.ndim == 1:
            contexts = contexts.reshape(-1, 1)
        if contexts.ndim != 2:
            raise InvalidDatasetError("contexts must be an n×d matrix")
        outcomes = np.array(self.outcomes, dtype=float).ravel()
        actions = _as_actions(np.ravel(self.actions), self.num_actions)

        n = contexts.shape[0]
        if n < 1:
            raise InvalidDatasetError("dataset must hold at least one record")
        if len(actions) != n or len(outcomes) != n:
            raise InvalidDatasetError(
                f"length mismatch: {n} contexts, {len(actions)} actions, {len(outcomes)} outcomes"
            )
        if not np.all(np.isfinite(contexts)) or not np.all(np.isfinite(outcomes)):
            raise InvalidDatasetError("contexts and outcomes must be finite")

        object.__setattr__(self, "contexts", _frozen(contexts))
        object.__setattr__(self, "actions", _frozen(actions))
        object.__setattr__(self, "outcomes", _frozen(outcomes))

    @property
    def n(self) -> int:
        return self.contexts.shape[0]

    @property
    def dim(self) -> int:
        return self.contexts.shape[1]

    def subset(self, indices: np.ndarray) -> "BanditDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return BanditDataset(
            self.contexts[indices], self.actions[indices], self.outcomes[indices], self.num_actions
        )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.contexts, columns=[f"x{j}" for j in range(self.dim)])
        frame["t"] = self.actions
        frame["y"] = self.outcomes
        return frame

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
        logger.info(f"Wrote {self.n} bandit records to {path}")
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path], num_actions: Optional[int] = None) -> "BanditDataset":
        frame = pd.read_csv(path, float_precision="round_trip")
        missing = {"t", "y"} - set(frame.columns)
        if missing:
            raise InvalidDatasetError(f"{path} lacks columns {sorted(missing)}")
        x_columns = sorted(
            (c for c in frame.columns if re.fullmatch(r"x\d+", c)), key=lambda c: int(c[1:])
        )
        actions = frame["t"].to_numpy()
        if num_actions is None:
            num_actions = max(2, int(actions.max()) + 1)
        return cls(
            frame[x_columns].to_numpy(dtype=float).reshape(len(frame), len(x_columns)),
            actions,
            frame["y"].to_numpy(dtype=float),
            num_actions,
        )


@dataclass(frozen=True)
class TrajectoryDataset:
    """
    K-stage logged data.

    stage_states holds one n×d_k block per stage (X_1..X_K), stage_actions is
    n×K (T_1..T_K) and outcomes is the final-stage reward Y. stage_rewards is
    only present in the immediate-reward setting (n×K, Y_1..Y_K).
    """

    stage_states: Tuple[np.ndarray, ...]
    stage_actions: np.ndarray
    outcomes: np.ndarray
    num_actions: int = 2
    stage_rewards: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.num_actions < 2:
            raise InvalidDatasetError(f"num_actions must be >= 2, got {self.num_actions}")
        if len(self.stage_states) < 1:
            raise InvalidDatasetError("a trajectory needs at least one stage")

        states = []
        for block in self.stage_states:
            block = np.array(block, dtype=float)
            if block.ndim == 1:
                block = block.reshape(-1, 1)
            if not np.all(np.isfinite(block)):
                raise InvalidDatasetError("stage states must be finite")
            states.append(_frozen(block))
        n = states[0].shape[0]
        if n < 1:
            raise InvalidDatasetError("dataset must hold at least one trajectory")
        if any(block.shape[0] != n for block in states):
            raise InvalidDatasetError("every stage must hold the same number of trajectories")

        actions = np.asarray(self.stage_actions)
        if actions.ndim == 1:
            actions = actions.reshape(-1, 1)
        if actions.shape != (n, len(states)):
            raise InvalidDatasetError(
                f"stage_actions must be {n}×{len(states)}, got {actions.shape}"
            )
        actions = _as_actions(actions, self.num_actions, "stage actions").reshape(n, len(states))

        outcomes = np.array(self.outcomes, dtype=float).ravel()
        if len(outcomes) != n or not np.all(np.isfinite(outcomes)):
            raise InvalidDatasetError("outcomes must be finite and one per trajectory")

        rewards = None
        if self.stage_rewards is not None:
            rewards = np.array(self.stage_rewards, dtype=float).reshape(n, len(states))
            if not np.all(np.isfinite(rewards)):
                raise InvalidDatasetError("stage rewards must be finite")
            rewards = _frozen(rewards)

        object.__setattr__(self, "stage_states", tuple(states))
        object.__setattr__(self, "stage_actions", _frozen(actions))
        object.__setattr__(self, "outcomes", _frozen(outcomes))
        object.__setattr__(self, "stage_rewards", rewards)

    @property
    def n(self) -> int:
        return self.stage_states[0].shape[0]

    @property
    def horizon(self) -> int:
        return len(self.stage_states)

    @property
    def state_dims(self) -> List[int]:
        return [block.shape[1] for block in self.stage_states]

    @property
    def initial_states(self) -> np.ndarray:
        return self.stage_states[0]

    def history_features(self, stage: int) -> np.ndarray:
        """
        Flattened history H_k = (X_1, T_1, ..., X_k) for 1-based stage k.

        Prior actions are reference coded (one column per action 1..m-1) so the
        block never duplicates a logistic intercept. The current state X_k is
        always the trailing block.
        """
        if not 1 <= stage <= self.horizon:
            raise InvalidInputError(f"stage must lie in 1..{self.horizon}, got {stage}")
        blocks = []
        for k in range(stage - 1):
            blocks.append(self.stage_states[k])
            dummies = np.zeros((self.n, self.num_actions - 1))
            taken = self.stage_actions[:, k]
            rows = np.flatnonzero(taken > 0)
            dummies[rows, taken[rows] - 1] = 1.0
            blocks.append(dummies)
        blocks.append(self.stage_states[stage - 1])
        return np.hstack(blocks)

    def subset(self, indices: np.ndarray) -> "TrajectoryDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return TrajectoryDataset(
            tuple(block[indices] for block in self.stage_states),
            self.stage_actions[indices],
            self.outcomes[indices],
            self.num_actions,
            None if self.stage_rewards is None else self.stage_rewards[indices],
        )

    def truncate(self, stages: int, outcomes: Optional[np.ndarray] = None) -> "TrajectoryDataset":
        """Keep the first `stages` stages, with `outcomes` (or Y_k when logged) as the outcome."""
        if not 1 <= stages <= self.horizon:
            raise InvalidInputError(f"stages must lie in 1..{self.horizon}, got {stages}")
        if outcomes is None:
            outcomes = self.outcomes if self.stage_rewards is None else self.stage_rewards[:, stages - 1]
        return TrajectoryDataset(
            self.stage_states[:stages],
            self.stage_actions[:, :stages],
            outcomes,
            self.num_actions,
            None if self.stage_rewards is None else self.stage_rewards[:, :stages],
        )

    def to_frame(self) -> pd.DataFrame:
        columns = {}
        for k, block in enumerate(self.stage_states, start=1):
            for j in range(block.shape[1]):
                columns[f"k{k}_x{j}"] = block[:, j]
            columns[f"k{k}_t"] = self.stage_actions[:, k - 1]
            if self.stage_rewards is not None:
                columns[f"k{k}_y"] = self.stage_rewards[:, k - 1]
        columns["y"] = self.outcomes
        return pd.DataFrame(columns)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
        logger.info(f"Wrote {self.n} trajectories (K={self.horizon}) to {path}")
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path], num_actions: Optional[int] = None) -> "TrajectoryDataset":
        frame = pd.read_csv(path, float_precision="round_trip")
        if "y" not in frame.columns:
            raise InvalidDatasetError(f"{path} lacks the outcome column y")

        stage_columns = {}
        for column in frame.columns:
            match = re.fullmatch(r"k(\d+)_(x(\d+)|t|y)", column)
            if match:
                stage_columns.setdefault(int(match.group(1)), []).append(column)
        if not stage_columns:
            raise InvalidDatasetError(f"{path} holds no k{{stage}}_* columns")
        horizon = max(stage_columns)
        if sorted(stage_columns) != list(range(1, horizon + 1)):
            raise InvalidDatasetError(f"{path} skips stages: found {sorted(stage_columns)}")

        states, actions, rewards = [], [], []
        for k in range(1, horizon + 1):
            x_columns = sorted(
                (c for c in stage_columns[k] if re.fullmatch(rf"k{k}_x\d+", c)),
                key=lambda c: int(c.split("_x")[1]),
            )
            if f"k{k}_t" not in frame.columns:
                raise InvalidDatasetError(f"{path} lacks column k{k}_t")
            states.append(frame[x_columns].to_numpy(dtype=float).reshape(len(frame), len(x_columns)))
            actions.append(frame[f"k{k}_t"].to_numpy())
            if f"k{k}_y" in frame.columns:
                rewards.append(frame[f"k{k}_y"].to_numpy(dtype=float))

        stage_actions = np.column_stack(actions)
        if num_actions is None:
            num_actions = max(2, int(stage_actions.max()) + 1)
        stage_rewards = np.column_stack(rewards) if len(rewards) == horizon else None
        return cls(tuple(states), stage_actions, frame["y"].to_numpy(dtype=float), num_actions, stage_rewards)


class PolicyKind(str, Enum):
    ANALYTIC = "analytic"
    FITTED_LOGISTIC = "fitted-logistic"
    PSEUDO = "pseudo"
    DETERMINISTIC = "deterministic"


class Policy:
    """
    A stochastic decision rule over m discrete actions.

    prob_fn maps an n×d matrix of contexts (or flattened histories) to an n×m
    matrix of action probabilities. Every call is checked: masses must be
    non-negative and sum to one within MASS_TOLERANCE, and a policy declared
    positive must keep every mass at or above its floor.
    """

    def __init__(
        self,
        prob_fn: Callable[[np.ndarray], np.ndarray],
        num_actions: int,
        kind: PolicyKind = PolicyKind.ANALYTIC,
        name: str = "",
        positive: bool = False,
        floor: float = POSITIVITY_FLOOR,
    ):
        if num_actions < 2:
            raise InvalidInputError(f"a policy needs at least two actions, got {num_actions}")
        self.prob_fn = prob_fn
        self.num_actions = num_actions
        self.kind = PolicyKind(kind)
        self.name = name or self.kind.value
        self.positive = positive
        self.floor = floor

    def __repr__(self) -> str:
        return f"Policy(name={self.name!r}, kind={self.kind.value}, m={self.num_actions})"

    @property
    def is_deterministic(self) -> bool:
        return self.kind == PolicyKind.DETERMINISTIC

    def probabilities(self, contexts: np.ndarray) -> np.ndarray:
        contexts = np.asarray(contexts, dtype=float)
        if contexts.ndim == 1:
            contexts = contexts.reshape(1, -1)
        probs = np.asarray(self.prob_fn(contexts), dtype=float)
        if probs.shape != (contexts.shape[0], self.num_actions):
            raise InvalidInputError(
                f"{self.name}: expected probabilities of shape {(contexts.shape[0], self.num_actions)}, got {probs.shape}"
            )
        if probs.size:
            if not np.all(np.isfinite(probs)) or probs.min() < -MASS_TOLERANCE:
                raise InvalidInputError(f"{self.name}: action masses must be finite and non-negative")
            if np.max(np.abs(probs.sum(axis=1) - 1.0)) > MASS_TOLERANCE:
                raise InvalidInputError(f"{self.name}: action masses do not sum to one")
            if self.positive and probs.min() < self.floor:
                raise InvalidInputError(f"{self.name}: mass below the positivity floor {self.floor}")
        return probs

    def action_probabilities(self, contexts: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """pi(actions[i] | contexts[i]) for every row."""
        probs = self.probabilities(contexts)
        actions = np.asarray(actions, dtype=np.int64)
        return probs[np.arange(len(actions)), actions]

    def sample(self, contexts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return sample_actions(self.probabilities(contexts), rng)

    @classmethod
    def binary(cls, prob_one: Callable[[np.ndarray], np.ndarray], name: str = "", **kwargs) -> "Policy":
        """Two-action policy from a function returning P(action=1 | context)."""

        def prob_fn(contexts: np.ndarray) -> np.ndarray:
            p = np.asarray(prob_one(contexts), dtype=float).ravel()
            return np.column_stack([1.0 - p, p])

        return cls(prob_fn, 2, name=name, **kwargs)

    @classmethod
    def uniform(cls, num_actions: int, name: str = "uniform") -> "Policy":
        def prob_fn(contexts: np.ndarray) -> np.ndarray:
            return np.full((contexts.shape[0], num_actions), 1.0 / num_actions)

        return cls(prob_fn, num_actions, PolicyKind.ANALYTIC, name, positive=True)

    @classmethod
    def deterministic(
        cls, action_fn: Callable[[np.ndarray], np.ndarray], num_actions: int, name: str = ""
    ) -> "Policy":
        """Policy that puts all mass on action_fn(context)."""

        def prob_fn(contexts: np.ndarray) -> np.ndarray:
            chosen = np.asarray(action_fn(contexts), dtype=np.int64).ravel()
            probs = np.zeros((contexts.shape[0], num_actions))
            probs[np.arange(len(chosen)), chosen] = 1.0
            return probs

        return cls(prob_fn, num_actions, PolicyKind.DETERMINISTIC, name)


def sample_actions(probabilities: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    Draw one action per row by inverse CDF with a single uniform per row.

    Row i gets the number of actions whose cumulative mass is <= u_i, which
    is exactly the point-mass action when a row is deterministic.
    """
    probabilities = np.atleast_2d(probabilities)
    uniforms = rng.random(probabilities.shape[0])
    cumulative = np.cumsum(probabilities, axis=1)
    actions = (cumulative <= uniforms[:, None]).sum(axis=1)
    return np.minimum(actions, probabilities.shape[1] - 1).astype(np.int64)


@dataclass(frozen=True)
class PredictionSet:
    """
    Finite union of closed intervals on the extended real line.

    Pieces are sorted and merged on construction, so overlapping or touching
    inputs collapse into disjoint pieces.
    """

    pieces: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        cleaned = []
        for lo, hi in self.pieces:
            lo, hi = float(lo), float(hi)
            if np.isnan(lo) or np.isnan(hi):
                raise InvalidInputError("interval endpoints must not be NaN")
            if lo > hi:
                raise InvalidInputError(f"interval [{lo}, {hi}] has lo > hi")
            cleaned.append((lo, hi))
        cleaned.sort()

        merged: List[Tuple[float, float]] = []
        for lo, hi in cleaned:
            if merged and lo <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
            else:
                merged.append((lo, hi))
        object.__setattr__(self, "pieces", tuple(merged))

    @classmethod
    def interval(cls, lo: float, hi: float) -> "PredictionSet":
        """[lo, hi], or the empty set when lo > hi."""
        if lo > hi:
            return cls()
        return cls(((lo, hi),))

    @classmethod
    def empty(cls) -> "PredictionSet":
        return cls()

    @classmethod
    def unbounded(cls) -> "PredictionSet":
        return cls(((-np.inf, np.inf),))

    @property
    def is_empty(self) -> bool:
        return not self.pieces

    @property
    def is_unbounded(self) -> bool:
        return any(np.isinf(lo) or np.isinf(hi) for lo, hi in self.pieces)

    @property
    def lebesgue_length(self) -> float:
        if self.is_unbounded:
            return float("inf")
        return float(sum(hi - lo for lo, hi in self.pieces))

    @property
    def lower(self) -> float:
        return self.pieces[0][0] if self.pieces else float("nan")

    @property
    def upper(self) -> float:
        return self.pieces[-1][1] if self.pieces else float("nan")

    def contains(self, y):
        values = np.asarray(y, dtype=float)
        inside = np.zeros(values.shape, dtype=bool)
        for lo, hi in self.pieces:
            inside |= (lo <= values) & (values <= hi)
        return bool(inside) if inside.ndim == 0 else inside

    def __contains__(self, y) -> bool:
        return bool(self.contains(y))


@dataclass(frozen=True)
class IntervalBatch:
    """Intervals [lower_i, upper_i] for a batch of test points; lower > upper encodes an empty set."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.array(self.lower, dtype=float).ravel()
        upper = np.array(self.upper, dtype=float).ravel()
        if lower.shape != upper.shape:
            raise InvalidInputError("lower and upper bounds must have equal length")
        object.__setattr__(self, "lower", _frozen(lower))
        object.__setattr__(self, "upper", _frozen(upper))

    def __len__(self) -> int:
        return len(self.lower)

    def __getitem__(self, index: int) -> PredictionSet:
        return PredictionSet.interval(self.lower[index], self.upper[index])

    @property
    def empty_mask(self) -> np.ndarray:
        return self.lower > self.upper

    def covers(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return (self.lower <= y) & (y <= self.upper)

    def lengths(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            widths = self.upper - self.lower
        return np.where(self.empty_mask, 0.0, widths)

    def to_sets(self) -> List[PredictionSet]:
        return [self[i] for i in range(len(self))]


@dataclass(frozen=True)
class SetBatch:
    """Arbitrary prediction sets for a batch of test points."""

    sets: Tuple[PredictionSet, ...]

    def __post_init__(self):
        object.__setattr__(self, "sets", tuple(self.sets))

    def __len__(self) -> int:
        return len(self.sets)

    def __getitem__(self, index: int) -> PredictionSet:
        return self.sets[index]

    def covers(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float).ravel()
        return np.array([s.contains(value) for s, value in zip(self.sets, y)], dtype=bool)

    def lengths(self) -> np.ndarray:
        return np.array([s.lebesgue_length for s in self.sets])

    def to_sets(self) -> List[PredictionSet]:
        return list(self.sets)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidInputError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.seed < 0:
            raise InvalidInputError("split seed must be non-negative")


def split_dataset(
    data: Union[BanditDataset, TrajectoryDataset], spec: SplitSpec
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Partition record indices into (train, calibration).

    |train| is train_fraction·n rounded half-up, then clamped to 1..n-1 so
    neither part is empty. Both index arrays come back sorted.
    """
    n = data.n
    if n < 2:
        raise InvalidDatasetError(f"need at least two records to split, got {n}")
    n_train = int(np.floor(spec.train_fraction * n + 0.5))
    n_train = min(max(n_train, 1), n - 1)
    permutation = np.random.default_rng(spec.seed).permutation(n)
    train = np.sort(permutation[:n_train])
    calibration = np.sort(permutation[n_train:])
    return train, calibration


def as_2d(contexts) -> np.ndarray:
    """Treat a single context vector as a one-row matrix."""
    contexts = np.asarray(contexts, dtype=float)
    if contexts.ndim == 1:
        return contexts.reshape(1, -1)
    return contexts
