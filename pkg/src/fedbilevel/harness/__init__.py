"""Configuration, experiment recipes, self-checks and the command-line front end."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config, resolve
from .experiments import RUN_COLUMNS, SWEEP_COLUMNS, run_experiment, run_sweep, write_run_csv, write_sweep_csv
from .verify import Check, verify

__all__ = [
    "Check",
    "ConfigError",
    "ExperimentConfig",
    "RUN_COLUMNS",
    "SWEEP_COLUMNS",
    "load_config",
    "parse_config",
    "resolve",
    "run_experiment",
    "run_sweep",
    "verify",
    "write_run_csv",
    "write_sweep_csv",
]
