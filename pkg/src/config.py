"""Environment-driven settings.

Values come from the process environment, optionally seeded from a `.env`
file in the working directory. CLI flags and JSON experiment configs
override what is read here.
"""

import logging
import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv

from errors import ConfigError

load_dotenv()
logger = logging.getLogger(__name__)


def _read_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {raw!r}")


def _read_float(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{name} must be a number, got {raw!r}")


@dataclass(frozen=True)
class Settings:
    seed: int = 2023
    threads: int = 1
    output_dir: Path = Path("./results")
    log_level: str = "INFO"
    positivity_floor: float = 1e-6
    forest_trees: int = 200

    @classmethod
    def from_env(cls) -> "Settings":
        """Build settings from COPP_* environment variables."""
        settings = cls(
            seed=_read_int("COPP_SEED", cls.seed),
            threads=_read_int("COPP_THREADS", cls.threads),
            output_dir=Path(os.getenv("COPP_OUTPUT_DIR", str(cls.output_dir))),
            log_level=os.getenv("COPP_LOG_LEVEL", cls.log_level).upper(),
            positivity_floor=_read_float("COPP_POSITIVITY_FLOOR", cls.positivity_floor),
            forest_trees=_read_int("COPP_FOREST_TREES", cls.forest_trees),
        )
        if settings.threads < 1:
            raise ConfigError(f"COPP_THREADS must be >= 1, got {settings.threads}")
        if not 0.0 < settings.positivity_floor < 0.5:
            raise ConfigError(f"COPP_POSITIVITY_FLOOR must lie in (0, 0.5), got {settings.positivity_floor}")
        if settings.forest_trees < 1:
            raise ConfigError(f"COPP_FOREST_TREES must be >= 1, got {settings.forest_trees}")
        if not isinstance(logging.getLevelName(settings.log_level), int):
            raise ConfigError(f"Unknown COPP_LOG_LEVEL {settings.log_level!r}")
        return settings
