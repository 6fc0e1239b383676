"""
Experiment runner: method × scenario × replication coverage studies.

Each replication draws a fresh dataset and a fresh set of target-policy
test points from derived generators, runs every requested method, and
records empirical coverage and average interval length. A method that
fails on one replication is logged and recorded as a failed row; the run
goes on.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from baselines import (
    ForestOutcomeModel,
    KernelConfig,
    dr_kernel_ci,
    is_kernel_ci,
    select_bandwidth,
    trajectory_dr_kernel_ci,
    trajectory_is_kernel_ci,
)
from conformal import NoisyDensity, copp_fit, direct_method, subsampling_method
from core_types import CSV_FLOAT_FORMAT, SplitSpec, derive_rng
from errors import ConfigError, CoppError
from extensions import MultiSplitConfig, copp_is_fit, copp_ms_fit
from propensity import fit_logistic, fit_penalized_logistic
from quantile_forest import QuantileForest, QuantileForestConfig
from sequential import (
    fit_stage_policies,
    sequential_copp_fit,
    sequential_copp_ms_fit,
    sequential_subsampling_method,
)
from synthetic import ScenarioSpec, make_scenario

logger = logging.getLogger(__name__)

METHODS = ("COPP", "COPP-IS", "COPP-MS", "COPP-IS-MS", "SM", "DM-true", "DM-false", "IS-CI", "DR-CI")
DENSITY_METHODS = ("DM-true", "DM-false")
CI_METHODS = ("IS-CI", "DR-CI")
COPP_VARIANTS = ("COPP", "COPP-IS", "COPP-MS", "COPP-IS-MS")
REPORT_COLUMNS = ["method", "replication", "coverage", "avg_length", "n_matched_cal", "failed"]
TUNING_POINTS = 1000


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioSpec
    methods: Tuple[str, ...] = ("COPP",)
    alpha: float = 0.1
    replications: int = 100
    test_points: int = 10000
    ms: MultiSplitConfig = MultiSplitConfig()
    master_seed: int = 2023
    threads: int = 1
    train_fraction: float = 0.75
    forest: QuantileForestConfig = QuantileForestConfig()
    known_behavior: bool = False
    penalized: Optional[bool] = None
    name: str = "experiment"

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        if not self.methods:
            raise ConfigError("at least one method is required")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        if self.scenario.example != 1 and any(m in DENSITY_METHODS for m in self.methods):
            raise ConfigError("DM-true / DM-false are only available for example 1")
        if self.replications < 1:
            raise ConfigError(f"replications must be >= 1, got {self.replications}")
        if self.test_points < 1:
            raise ConfigError(f"test_points must be >= 1, got {self.test_points}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.master_seed < 0:
            raise ConfigError("master_seed must be non-negative")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")

    @property
    def use_penalized(self) -> bool:
        return self.scenario.high_dim if self.penalized is None else self.penalized

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "scenario": self.scenario.to_dict(),
            "methods": list(self.methods),
            "alpha": self.alpha,
            "replications": self.replications,
            "test_points": self.test_points,
            "ms": asdict(self.ms),
            "master_seed": self.master_seed,
            "threads": self.threads,
            "train_fraction": self.train_fraction,
            "forest": asdict(self.forest),
            "known_behavior": self.known_behavior,
            "penalized": self.use_penalized,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "ExperimentConfig":
        """Build a config from parsed JSON; every problem surfaces as ConfigError."""
        try:
            payload = dict(payload)
            scenario = ScenarioSpec(**payload.pop("scenario"))
            ms = MultiSplitConfig(**payload.pop("ms", {}))
            forest = QuantileForestConfig(**payload.pop("forest", {}))
            methods = payload.pop("methods", ("COPP",))
            if isinstance(methods, str):
                methods = [m.strip() for m in methods.split(",") if m.strip()]
            return cls(scenario=scenario, ms=ms, forest=forest, methods=tuple(methods), **payload)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as error:
            raise ConfigError(f"invalid experiment config: {error}") from error

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "ExperimentConfig":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as error:
            raise ConfigError(f"cannot read experiment config {path}: {error}") from error
        if isinstance(payload, list):
            raise ConfigError(f"{path} holds a list; use load_configs for several experiments")
        return cls.from_dict(payload)


def load_configs(path: Union[str, Path], defaults: Optional[Dict[str, Any]] = None) -> List[ExperimentConfig]:
    """
    One config or a JSON list of them.

    `defaults` fills top-level fields (and `forest` keys) that the file
    leaves out, so values in the file win.
    """
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as error:
        raise ConfigError(f"cannot read experiment config {path}: {error}") from error
    items = payload if isinstance(payload, list) else [payload]
    if not all(isinstance(item, dict) for item in items):
        raise ConfigError(f"{path} must hold a JSON object or a list of objects")
    return [ExperimentConfig.from_dict(_with_defaults(item, defaults or {})) for item in items]


def _with_defaults(payload: Dict[str, Any], defaults: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(defaults)
    merged.update(payload)
    if isinstance(defaults.get("forest"), dict) and isinstance(payload.get("forest"), dict):
        merged["forest"] = {**defaults["forest"], **payload["forest"]}
    return merged


@dataclass
class MethodResult:
    method: str
    replication: int
    coverage: float = float("nan")
    avg_length: float = float("nan")
    n_matched_cal: float = float("nan")
    effective_sample_size: float = float("nan")
    failed: bool = False
    error: str = ""


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    results: List[MethodResult] = field(default_factory=list)

    @property
    def failures(self) -> List[MethodResult]:
        return [row for row in self.results if row.failed]

    def rows(self, method: str) -> List[MethodResult]:
        return [row for row in self.results if row.method == method]

    def summary(self) -> Dict[str, Dict[str, float]]:
        """Mean / sd of coverage and length per method over successful replications."""
        summary = {}
        for method in self.config.methods:
            rows = self.rows(method)
            done = [row for row in rows if not row.failed]
            coverage = np.array([row.coverage for row in done])
            length = np.array([row.avg_length for row in done])
            matched = np.array([row.n_matched_cal for row in done])
            ess = np.array([row.effective_sample_size for row in done])
            summary[method] = {
                "mean_coverage": _mean(coverage),
                "sd_coverage": _sd(coverage),
                "mean_length": _mean(length),
                "sd_length": _sd(length),
                "mean_matched_cal": _mean(matched),
                "mean_effective_sample_size": _mean(ess),
                "replications": len(done),
                "failures": len(rows) - len(done),
            }
        return summary

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([asdict(row) for row in self.results])
        if frame.empty:
            return pd.DataFrame(columns=REPORT_COLUMNS)
        return frame[REPORT_COLUMNS]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "summary": self.summary(),
            "failures": [
                {"method": row.method, "replication": row.replication, "error": row.error} for row in self.failures
            ],
        }


def _mean(values: np.ndarray) -> float:
    values = values[~np.isnan(values)] if values.size else values
    return float(np.mean(values)) if values.size else float("nan")


def _sd(values: np.ndarray) -> float:
    values = values[~np.isnan(values)] if values.size else values
    return float(np.std(values, ddof=1)) if values.size > 1 else 0.0


def _fit_behavior(features, labels, rng, penalized: bool, num_actions: int):
    if penalized:
        return fit_penalized_logistic(features, labels, rng, num_actions=num_actions).as_policy()
    return fit_logistic(features, labels, num_actions=num_actions).as_policy()


class _Replication:
    """All methods for one replication, sharing its dataset, test points and split."""

    def __init__(self, config: ExperimentConfig, replication: int):
        self.config = config
        self.replication = replication
        self.scenario = make_scenario(config.scenario)
        seed = config.master_seed
        self.data = self.scenario.generate(config.scenario.n, derive_rng(seed, replication, "data")).data
        self.test_x, self.test_y = self.scenario.sample_test_points(
            config.test_points, derive_rng(seed, replication, "test")
        )
        split_seed = int(derive_rng(seed, replication, "split").integers(0, 2**31 - 1))
        self.split = SplitSpec(config.train_fraction, split_seed)

    def rng(self, purpose: str) -> np.random.Generator:
        return derive_rng(self.config.master_seed, self.replication, purpose)

    def run(self, method: str) -> MethodResult:
        row = MethodResult(method, self.replication)
        try:
            batch, diagnostics = self._predict(method)
            lengths = batch.lengths()
            row.coverage = float(np.mean(batch.covers(self.test_y)))
            row.avg_length = float(np.mean(lengths))
            row.n_matched_cal = float(diagnostics.get("n_matched_cal", np.nan))
            row.effective_sample_size = float(diagnostics.get("effective_sample_size", np.nan))
        except CoppError as error:
            logger.warning(f"{method} failed on replication {self.replication}: {error}")
            row.failed = True
            row.error = f"{type(error).__name__}: {error}"
        return row

    def _predict(self, method: str):
        if self.scenario.is_sequential:
            return self._predict_sequential(method)
        return self._predict_bandit(method)

    def _predict_bandit(self, method: str):
        config, data, scenario = self.config, self.data, self.scenario
        rng = self.rng(method)
        target = scenario.target_policy
        behavior = scenario.behavior_policy if config.known_behavior else None
        penalized = config.use_penalized
        common = dict(alpha=config.alpha, rng=rng, forest_config=config.forest)

        if method in ("COPP", "COPP-IS", "SM"):
            fit = {"COPP": copp_fit, "COPP-IS": copp_is_fit, "SM": subsampling_method}[method]
            model = fit(data, target, behavior, self.split, penalized=penalized, **common)
        elif method in ("COPP-MS", "COPP-IS-MS"):
            ms = replace(config.ms, importance_sampling=method == "COPP-IS-MS", train_fraction=config.train_fraction)
            model = copp_ms_fit(data, target, behavior, ms, penalized=penalized, **common)
        elif method in DENSITY_METHODS:
            density = scenario.oracle_density()
            if method == "DM-false":
                density = NoisyDensity(density, int(self.rng("density-noise").integers(2**32)))
            model = direct_method(data, target, behavior, density, self.split, **common)
        else:
            return self._kernel_bandit(method, rng)
        return model.predict_intervals(self.test_x), model.diagnostics

    def _kernel_bandit(self, method: str, rng: np.random.Generator):
        config, data, scenario = self.config, self.data, self.scenario
        target = scenario.target_policy
        if config.known_behavior:
            behavior = scenario.behavior_policy
        else:
            behavior = _fit_behavior(data.contexts, data.actions, rng, config.use_penalized, data.num_actions)

        if method == "IS-CI":
            def build(kernel: KernelConfig, queries):
                return is_kernel_ci(data, target, behavior, kernel, config.alpha, queries)
        else:
            outcome_model = ForestOutcomeModel(data.num_actions, config.forest).fit(data, rng)

            def build(kernel: KernelConfig, queries):
                return dr_kernel_ci(data, target, behavior, outcome_model, kernel, config.alpha, queries)

        return self._tuned_kernel(build), {}

    def _tuned_kernel(self, build):
        tune_x, tune_y = self.scenario.sample_test_points(TUNING_POINTS, self.rng("tuning"))
        kernel, _ = select_bandwidth(lambda k: build(k, tune_x), tune_y)
        return build(kernel, self.test_x)

    def _predict_sequential(self, method: str):
        config, data, scenario = self.config, self.data, self.scenario
        rng = self.rng(method)
        targets = scenario.target_policies
        behaviors = scenario.behavior_policies if config.known_behavior else None
        penalized = config.use_penalized
        common = dict(alpha=config.alpha, rng=rng, forest_config=config.forest, penalized=penalized)

        if method in ("COPP", "COPP-IS"):
            model = sequential_copp_fit(
                data, targets, behaviors, self.split, importance_sampling=method == "COPP-IS", **common
            )
        elif method in ("COPP-MS", "COPP-IS-MS"):
            ms = replace(config.ms, importance_sampling=method == "COPP-IS-MS", train_fraction=config.train_fraction)
            model = sequential_copp_ms_fit(data, targets, behaviors, ms, **common)
        elif method == "SM":
            model = sequential_subsampling_method(data, targets, behaviors, self.split, **common)
        else:
            return self._kernel_sequential(method, rng)
        return model.predict_intervals(self.test_x), model.diagnostics

    def _kernel_sequential(self, method: str, rng: np.random.Generator):
        config, data, scenario = self.config, self.data, self.scenario
        targets = scenario.target_policies
        if config.known_behavior:
            behaviors = scenario.behavior_policies
        else:
            behaviors = fit_stage_policies(data, None, config.use_penalized, rng).policies

        if method == "IS-CI":
            def build(kernel: KernelConfig, queries):
                return trajectory_is_kernel_ci(data, targets, behaviors, kernel, config.alpha, queries)
        else:
            mean_forest = QuantileForest(config.forest).fit(data.initial_states, data.outcomes, rng)

            def build(kernel: KernelConfig, queries):
                return trajectory_dr_kernel_ci(
                    data, targets, behaviors, mean_forest.predict_mean, kernel, config.alpha, queries
                )

        return self._tuned_kernel(build), {}


def run_replication(config: ExperimentConfig, replication: int) -> List[MethodResult]:
    runner = _Replication(config, replication)
    return [runner.run(method) for method in config.methods]


def run_experiment(config: ExperimentConfig, progress: bool = True) -> ExperimentReport:
    """
    Run every (replication, method) cell of one experiment.

    Replications run on up to config.threads threads; results are assembled
    in (replication, method) order, so the report does not depend on the
    schedule.
    """
    logger.info(
        f"Running {config.name}: example {config.scenario.example}, {config.replications} replications, "
        f"methods {', '.join(config.methods)}"
    )
    results: List[List[MethodResult]] = [[] for _ in range(config.replications)]
    with tqdm(total=config.replications, desc=config.name, disable=not progress) as bar:
        if config.threads > 1:
            with ThreadPoolExecutor(max_workers=config.threads) as pool:
                futures = {pool.submit(run_replication, config, rep): rep for rep in range(config.replications)}
                for future, rep in futures.items():
                    results[rep] = future.result()
                    bar.update(1)
        else:
            for rep in range(config.replications):
                results[rep] = run_replication(config, rep)
                bar.update(1)

    report = ExperimentReport(config, [row for rows in results for row in rows])
    if report.failures:
        logger.warning(f"{config.name}: {len(report.failures)} method runs failed")
    return report


def emit_report(
    report: ExperimentReport,
    out_dir: Union[str, Path],
    formats: Sequence[str] = ("csv", "json"),
    stem: Optional[str] = None,
) -> List[Path]:
    """Write <stem>.csv (one row per method and replication) and/or <stem>.json (config + summaries)."""
    unknown = set(formats) - {"csv", "json"}
    if unknown:
        raise ConfigError(f"unknown report formats {sorted(unknown)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or report.config.name
    written = []
    if "csv" in formats:
        path = out_dir / f"{stem}.csv"
        report.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
        written.append(path)
    if "json" in formats:
        path = out_dir / f"{stem}.json"
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(path)
    for path in written:
        logger.info(f"Wrote {path}")
    return written


def dm_comparison_configs(replications: int = 100, master_seed: int = 2023, test_points: int = 10000, **overrides) -> List[ExperimentConfig]:
    """Example 1 with 500 calibration points: DM (true / noisy densities), SM and COPP, for both targets."""
    return [
        ExperimentConfig(
            scenario=ScenarioSpec(example=1, n=2000, target=target),
            methods=("DM-true", "DM-false", "SM", "COPP"),
            replications=replications,
            test_points=test_points,
            master_seed=master_seed,
            name=f"dm-comparison-{target}",
            **overrides,
        )
        for target in ("stochastic", "deterministic")
    ]


def variant_grid_configs(replications: int = 100, master_seed: int = 2023, test_points: int = 10000, **overrides) -> List[ExperimentConfig]:
    """Examples 1 and 2 in low and high dimension; kernel baselines in low dimension only."""
    configs = []
    for example in (1, 2):
        for high_dim in (False, True):
            methods = COPP_VARIANTS if high_dim else COPP_VARIANTS + CI_METHODS
            configs.append(
                ExperimentConfig(
                    scenario=ScenarioSpec(example=example, n=2000, high_dim=high_dim),
                    methods=methods,
                    replications=replications,
                    test_points=test_points,
                    ms=MultiSplitConfig(repetitions=50 if high_dim else 100),
                    master_seed=master_seed,
                    name=f"variant-grid-example{example}-{'high' if high_dim else 'low'}",
                    **overrides,
                )
            )
    return configs


def horizon_configs(replications: int = 100, master_seed: int = 2023, test_points: int = 10000, **overrides) -> List[ExperimentConfig]:
    """Example 3 at horizons 3, 4 and 5 with the four COPP variants."""
    return [
        ExperimentConfig(
            scenario=ScenarioSpec(example=3, n=2000, horizon=horizon),
            methods=COPP_VARIANTS,
            replications=replications,
            test_points=test_points,
            master_seed=master_seed,
            name=f"horizons-{horizon}",
            **overrides,
        )
        for horizon in (3, 4, 5)
    ]


PRESETS = {"figure2": dm_comparison_configs, "figure3": variant_grid_configs, "figure4": horizon_configs}
# descriptive spellings accepted on the command line
PRESET_ALIASES = {"figure2": ("dm-comparison",), "figure3": ("variant-grid",), "figure4": ("horizons",)}
