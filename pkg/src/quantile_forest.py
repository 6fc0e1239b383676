"""
Quantile regression forest.

Each tree is a scikit-learn CART regressor grown on a bootstrap resample.
Instead of averaging leaf means, the forest keeps which training outcomes
landed in every leaf, so a query gets a full weighted empirical distribution
over training outcomes: quantiles and means both come from it.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from sklearn.tree import DecisionTreeRegressor

from core_types import QUANTILE_TOLERANCE, as_2d
from errors import InvalidInputError, NotFittedError

logger = logging.getLogger(__name__)

# Query rows × training points held densely per prediction chunk
_DENSE_CELLS = 1 << 22


@dataclass(frozen=True)
class QuantileForestConfig:
    num_trees: int = 200
    min_leaf_size: int = 5
    max_features: Optional[int] = None
    bootstrap: bool = True
    n_jobs: int = 1

    def __post_init__(self):
        if self.num_trees < 1:
            raise InvalidInputError(f"num_trees must be >= 1, got {self.num_trees}")
        if self.min_leaf_size < 1:
            raise InvalidInputError(f"min_leaf_size must be >= 1, got {self.min_leaf_size}")
        if self.max_features is not None and self.max_features < 1:
            raise InvalidInputError(f"max_features must be >= 1, got {self.max_features}")
        if self.n_jobs < 1:
            raise InvalidInputError(f"n_jobs must be >= 1, got {self.n_jobs}")

    def features_for(self, dim: int) -> int:
        """Features tried per split: the configured count, or ceil(d/3)."""
        chosen = self.max_features if self.max_features is not None else math.ceil(dim / 3)
        return int(min(max(chosen, 1), dim))


class QuantileForest:
    """Random forest whose leaves remember their training outcomes."""

    def __init__(self, config: Optional[QuantileForestConfig] = None):
        self.config = config or QuantileForestConfig()
        self.trees: List[DecisionTreeRegressor] = []
        self._tree_rows: List[np.ndarray] = []
        self._tree_leaves: List[np.ndarray] = []
        self._leaf_matrix: Optional[sparse.csr_matrix] = None
        self._node_offsets: Optional[np.ndarray] = None
        self._order: Optional[np.ndarray] = None
        self._rank: Optional[np.ndarray] = None
        self.y_sorted: Optional[np.ndarray] = None
        self.dim = 0

    @property
    def is_fitted(self) -> bool:
        return self._leaf_matrix is not None

    @property
    def num_training(self) -> int:
        self._check_fitted()
        return len(self.y_sorted)

    def _check_fitted(self):
        if not self.is_fitted:
            raise NotFittedError("quantile forest has not been fitted")

    def fit(self, features: np.ndarray, outcomes: np.ndarray, rng: np.random.Generator) -> "QuantileForest":
        """
        Grow the forest.

        Args:
            features: n×d training contexts
            outcomes: n training outcomes
            rng: Generator that seeds every tree (drawn up front, so results do
                not depend on how trees are scheduled across threads)

        Returns:
            self, fitted
        """
        features = np.asarray(features, dtype=float)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        outcomes = np.asarray(outcomes, dtype=float).ravel()
        n, dim = features.shape
        config = self.config

        if len(outcomes) != n:
            raise InvalidInputError(f"{n} feature rows but {len(outcomes)} outcomes")
        if n < 2 * config.min_leaf_size:
            raise InvalidInputError(
                f"need at least {2 * config.min_leaf_size} training points for min_leaf_size="
                f"{config.min_leaf_size}, got {n}"
            )
        if not np.all(np.isfinite(features)) or not np.all(np.isfinite(outcomes)):
            raise InvalidInputError("forest training data must be finite")

        self.dim = dim
        self._order = np.argsort(outcomes, kind="stable")
        self._rank = np.empty(n, dtype=np.int64)
        self._rank[self._order] = np.arange(n)
        self.y_sorted = outcomes[self._order]

        seeds = rng.integers(0, 2**31 - 1, size=config.num_trees)
        max_features = config.features_for(dim)

        def grow(seed: int) -> Tuple[DecisionTreeRegressor, np.ndarray, np.ndarray]:
            tree_rng = np.random.default_rng(seed)
            rows = tree_rng.integers(0, n, size=n) if config.bootstrap else np.arange(n)
            tree = DecisionTreeRegressor(
                min_samples_leaf=config.min_leaf_size,
                max_features=max_features,
                random_state=int(seed),
            )
            tree.fit(features[rows], outcomes[rows])
            return tree, rows, tree.apply(features[rows])

        if config.n_jobs > 1:
            with ThreadPoolExecutor(max_workers=config.n_jobs) as pool:
                grown = list(pool.map(grow, seeds))
        else:
            grown = [grow(seed) for seed in seeds]

        self.trees = [tree for tree, _, _ in grown]
        self._tree_rows = [rows for _, rows, _ in grown]
        self._tree_leaves = [leaves for _, _, leaves in grown]

        # One sparse block per tree: row = node id, column = training point in
        # outcome order, entry = in-bag multiplicity / leaf size
        blocks = []
        offsets = np.zeros(len(grown), dtype=np.int64)
        total_nodes = 0
        for t, (tree, rows, leaves) in enumerate(grown):
            offsets[t] = total_nodes
            node_count = tree.tree_.node_count
            leaf_sizes = np.bincount(leaves, minlength=node_count)
            block = sparse.csr_matrix(
                (1.0 / leaf_sizes[leaves], (leaves, self._rank[rows])), shape=(node_count, n)
            )
            blocks.append(block)
            total_nodes += node_count
        self._node_offsets = offsets
        self._leaf_matrix = sparse.vstack(blocks, format="csr")

        logger.debug(
            f"Grew {config.num_trees} trees on {n} points (d={dim}, max_features={max_features}, "
            f"{total_nodes} nodes)"
        )
        return self

    def _query_rows(self, features: np.ndarray):
        """Yield (row slice, dense weights in outcome order) chunks for the query matrix."""
        self._check_fitted()
        features = as_2d(features)
        if features.shape[1] != self.dim:
            raise InvalidInputError(f"forest expects {self.dim} features, got {features.shape[1]}")
        n_query = features.shape[0]
        num_trees = len(self.trees)
        chunk = max(1, _DENSE_CELLS // max(self.num_training, 1))
        for start in range(0, n_query, chunk):
            stop = min(start + chunk, n_query)
            block = features[start:stop]
            columns = np.concatenate(
                [tree.apply(block) + self._node_offsets[t] for t, tree in enumerate(self.trees)]
            )
            rows = np.tile(np.arange(stop - start), num_trees)
            selector = sparse.csr_matrix(
                (np.full(len(rows), 1.0 / num_trees), (rows, columns)),
                shape=(stop - start, self._leaf_matrix.shape[0]),
            )
            yield slice(start, stop), (selector @ self._leaf_matrix).toarray()

    def leaf_weights(self, features: np.ndarray) -> np.ndarray:
        """Dense query×training weights w_i(x), training points in their original order."""
        weights = np.empty((as_2d(features).shape[0], self.num_training))
        for rows, block in self._query_rows(features):
            weights[rows] = block[:, self._rank]
        return weights

    def predict_quantiles(self, features: np.ndarray, levels: Sequence[float]) -> np.ndarray:
        """
        Weighted empirical quantiles inf{y : F(y) >= level} for every query row.

        Returns:
            n_query × len(levels) array; for sorted levels each row is sorted too.
        """
        levels = np.asarray(levels, dtype=float).ravel()
        if np.any((levels <= 0) | (levels >= 1)):
            raise InvalidInputError(f"quantile levels must lie in (0, 1), got {levels.tolist()}")
        result = np.empty((as_2d(features).shape[0], len(levels)))
        last = self.num_training - 1
        for rows, block in self._query_rows(features):
            cumulative = np.cumsum(block, axis=1)
            for j, level in enumerate(levels):
                index = np.sum(cumulative < level - QUANTILE_TOLERANCE, axis=1)
                result[rows, j] = self.y_sorted[np.minimum(index, last)]
        return result

    def predict_interval(self, features: np.ndarray, lower: float, upper: float) -> Tuple[np.ndarray, np.ndarray]:
        if lower > upper:
            raise InvalidInputError(f"lower level {lower} exceeds upper level {upper}")
        quantiles = self.predict_quantiles(features, [lower, upper])
        return quantiles[:, 0], quantiles[:, 1]

    def predict_mean(self, features: np.ndarray) -> np.ndarray:
        result = np.empty(as_2d(features).shape[0])
        for rows, block in self._query_rows(features):
            result[rows] = block @ self.y_sorted
        return result

    def leaf_members(self, tree_index: int, leaf: int) -> np.ndarray:
        """Training indices (with in-bag multiplicity) that fell into `leaf` of one tree."""
        self._check_fitted()
        rows = self._tree_rows[tree_index]
        return np.sort(rows[self._tree_leaves[tree_index] == leaf])

    def leaves(self, tree_index: int) -> np.ndarray:
        self._check_fitted()
        return np.unique(self._tree_leaves[tree_index])


def fit_forest(
    features: np.ndarray,
    outcomes: np.ndarray,
    config: Optional[QuantileForestConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> QuantileForest:
    rng = rng if rng is not None else np.random.default_rng(0)
    return QuantileForest(config).fit(features, outcomes, rng)
