"""Experiment harness: config, keyed random streams, drivers, CLI."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .experiments import (
    ExperimentResult,
    NumericalError,
    render_csv,
    run_experiment,
    write_csv,
)
from .streams import RngStreamKey, derive_stream

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentResult",
    "NumericalError",
    "RngStreamKey",
    "derive_stream",
    "load_config",
    "parse_config",
    "render_csv",
    "run_experiment",
    "write_csv",
]
