"""
COPP benchmark command line.

Subcommands:
    simulate       write a synthetic dataset (CSV) and its truth sidecar (JSON)
    run            run experiments from a JSON config
    figure2        Example 1, DM / SM / COPP, stochastic and deterministic targets (alias dm-comparison)
    figure3        Examples 1-2, COPP variants and kernel baselines (alias variant-grid)
    figure4        Example 3, horizons 3-5 (alias horizons)
    predict        COPP intervals on a user-supplied bandit dataset (no coverage)
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from bench import METHODS, PRESET_ALIASES, PRESETS, ExperimentConfig, emit_report, load_configs, run_experiment
from conformal import copp_fit
from config import Settings
from core_types import CSV_FLOAT_FORMAT, BanditDataset, SplitSpec
from errors import ConfigError, CoppError
from propensity import LogisticModel
from quantile_forest import QuantileForestConfig
from synthetic import ScenarioSpec, generate, truth_sidecar

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_PARTIAL = 3


def _method_list(raw: str) -> List[str]:
    methods = [m.strip() for m in raw.split(",") if m.strip()]
    unknown = [m for m in methods if m not in METHODS]
    if unknown or not methods:
        raise ConfigError(f"--methods must be a comma list drawn from {', '.join(METHODS)}, got {raw!r}")
    return methods


def _format_list(raw: str) -> List[str]:
    formats = [f.strip().lower() for f in raw.split(",") if f.strip()]
    if not formats or set(formats) - {"csv", "json"}:
        raise ConfigError(f"--formats must be a comma list of csv and json, got {raw!r}")
    return formats


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed (default COPP_SEED)")
    common.add_argument("--out", type=Path, help="output directory (default COPP_OUTPUT_DIR)")
    common.add_argument("--threads", type=int, help="worker threads (default COPP_THREADS)")
    common.add_argument("--log-level", help="logging level (default COPP_LOG_LEVEL)")
    common.add_argument("--quiet", action="store_true", help="hide progress bars")

    experiment = argparse.ArgumentParser(add_help=False)
    experiment.add_argument("--reps", type=int, help="replications per experiment")
    experiment.add_argument("--methods", help="comma-separated subset of methods")
    experiment.add_argument("--formats", default="csv,json", help="report formats: csv,json")

    parser = argparse.ArgumentParser(prog="copp", description="Conformal off-policy prediction benchmarks")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    simulate.add_argument("--config", type=Path, help="JSON ScenarioSpec")
    simulate.add_argument("--example", type=int, default=1, choices=(1, 2, 3))
    simulate.add_argument("--n", type=int, default=2000)
    simulate.add_argument("--high-dim", action="store_true")
    simulate.add_argument("--horizon", type=int)
    simulate.add_argument("--target", default="stochastic", choices=("stochastic", "deterministic"))

    run = commands.add_parser("run", parents=[common, experiment], help="run experiments from a JSON config")
    run.add_argument("--config", type=Path, required=True, help="JSON experiment config (object or list)")

    for name, builder in PRESETS.items():
        preset = commands.add_parser(
            name, aliases=PRESET_ALIASES[name], parents=[common, experiment], help=builder.__doc__.splitlines()[0]
        )
        preset.add_argument("--test-points", type=int, default=10000)
        preset.set_defaults(preset=name)

    predict = commands.add_parser("predict", parents=[common], help="COPP intervals on a logged bandit CSV")
    predict.add_argument("--data", type=Path, required=True, help="bandit CSV with x*, t, y columns")
    predict.add_argument("--target", type=Path, required=True, help="target policy as logistic-model JSON")
    predict.add_argument("--queries", type=Path, required=True, help="CSV of contexts with x* columns")
    predict.add_argument("--alpha", type=float, default=0.1)
    predict.add_argument("--train-fraction", type=float, default=0.75)
    predict.add_argument("--penalized", action="store_true", help="cross-validated ridge behavior fit")
    return parser


def _settings_with_flags(args: argparse.Namespace) -> Settings:
    settings = Settings.from_env()
    overrides = {
        "seed": args.seed,
        "threads": args.threads,
        "output_dir": args.out,
        "log_level": args.log_level.upper() if args.log_level else None,
    }
    settings = replace(settings, **{k: v for k, v in overrides.items() if v is not None})
    if settings.threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {settings.threads}")
    if not isinstance(logging.getLevelName(settings.log_level), int):
        raise ConfigError(f"Unknown log level {settings.log_level!r}")
    return settings


def _apply_flags(config: ExperimentConfig, args: argparse.Namespace) -> Optional[ExperimentConfig]:
    changes = {}
    if args.threads is not None:
        changes["threads"] = args.threads
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if args.reps is not None:
        changes["replications"] = args.reps
    if args.methods:
        keep = [m for m in config.methods if m in _method_list(args.methods)]
        if not keep:
            logger.warning(f"{config.name}: none of --methods applies, skipping")
            return None
        changes["methods"] = tuple(keep)
    return replace(config, **changes)


def cmd_simulate(args: argparse.Namespace, settings: Settings) -> int:
    if args.config:
        try:
            payload = json.loads(args.config.read_text(encoding="utf-8"))
            spec = ScenarioSpec(**payload)
        except (OSError, json.JSONDecodeError, TypeError, ValueError) as error:
            raise ConfigError(f"invalid scenario config {args.config}: {error}") from error
    else:
        try:
            spec = ScenarioSpec(args.example, args.n, args.high_dim, args.horizon, args.target, settings.seed)
        except ValueError as error:
            raise ConfigError(str(error)) from error
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)

    sample = generate(spec)
    stem = f"example{spec.example}" + ("-high" if spec.high_dim else "") + f"-seed{spec.seed}"
    out_dir = settings.output_dir
    sample.data.to_csv(out_dir / f"{stem}.csv")
    sidecar = out_dir / f"{stem}.truth.json"
    sidecar.write_text(json.dumps(truth_sidecar(spec), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Wrote truth sidecar {sidecar}")
    print(f"✅ Wrote {out_dir / (stem + '.csv')} and {sidecar}")
    return EXIT_OK


def _run_configs(configs: List[ExperimentConfig], args: argparse.Namespace, settings: Settings) -> int:
    formats = _format_list(args.formats)
    progress = not args.quiet and sys.stderr.isatty()
    failed = 0
    for config in configs:
        report = run_experiment(config, progress=progress)
        emit_report(report, settings.output_dir, formats)
        failed += len(report.failures)
        print(f"\n=== {config.name} ===")
        for method, stats in report.summary().items():
            print(
                f"  {method:<11} coverage {stats['mean_coverage']:.3f} ± {stats['sd_coverage']:.3f}"
                f"  length {stats['mean_length']:.3f}  failures {stats['failures']}"
            )
    if failed:
        logger.warning(f"{failed} (method, replication) runs failed")
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_run(args: argparse.Namespace, settings: Settings) -> int:
    defaults = {
        "master_seed": settings.seed,
        "threads": settings.threads,
        "forest": {"num_trees": settings.forest_trees},
    }
    configs = [_apply_flags(config, args) for config in load_configs(args.config, defaults)]
    return _run_configs([config for config in configs if config is not None], args, settings)


def cmd_preset(args: argparse.Namespace, settings: Settings) -> int:
    builder = PRESETS[args.preset]
    configs = builder(
        replications=args.reps or 100,
        master_seed=settings.seed,
        test_points=args.test_points,
        threads=settings.threads,
        forest=QuantileForestConfig(num_trees=settings.forest_trees),
    )
    configs = [_apply_flags(config, args) for config in configs]
    return _run_configs([config for config in configs if config is not None], args, settings)


def cmd_predict(args: argparse.Namespace, settings: Settings) -> int:
    try:
        target = LogisticModel.from_json(args.target.read_text(encoding="utf-8")).as_policy("target")
        queries = pd.read_csv(args.queries, float_precision="round_trip")
    except (OSError, json.JSONDecodeError, KeyError) as error:
        raise ConfigError(f"cannot read predict inputs: {error}") from error
    try:
        data = BanditDataset.from_csv(args.data, num_actions=target.num_actions)
    except (OSError, ValueError) as error:
        # InvalidDatasetError is a ValueError
        raise ConfigError(f"cannot read {args.data}: {error}") from error
    columns = [f"x{j}" for j in range(data.dim)]
    missing = set(columns) - set(queries.columns)
    if missing:
        raise ConfigError(f"{args.queries} lacks columns {sorted(missing)}")

    model = copp_fit(
        data,
        target,
        split=SplitSpec(args.train_fraction, settings.seed),
        alpha=args.alpha,
        rng=np.random.default_rng(settings.seed),
        forest_config=QuantileForestConfig(num_trees=settings.forest_trees),
        penalized=args.penalized,
        floor=settings.positivity_floor,
    )
    batch = model.predict_intervals(queries[columns].to_numpy(dtype=float))
    result = queries.copy()
    result["lower"] = batch.lower
    result["upper"] = batch.upper
    out_dir = settings.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{args.queries.stem}.intervals.csv"
    result.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    print(f"✅ Wrote {len(result)} intervals to {path}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "predict": cmd_predict}
COMMANDS.update({name: cmd_preset for name in PRESETS})
COMMANDS.update({alias: cmd_preset for aliases in PRESET_ALIASES.values() for alias in aliases})


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)
    try:
        settings = _settings_with_flags(args)
    except ConfigError as error:
        logging.basicConfig(level=logging.INFO)
        logger.error(f"Configuration error: {error}")
        return EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, settings.log_level), format="%(levelname)s %(name)s: %(message)s")

    try:
        return COMMANDS[args.command](args, settings)
    except ConfigError as error:
        logger.error(f"Configuration error: {error}")
        return EXIT_CONFIG
    except CoppError as error:
        logger.error(f"{args.command} failed: {error}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
