"""Experiment configuration, baselines, metrics and the command-line interface."""
from .baselines import BaselineError, BaselineResult, baseline_centralized, baseline_local, evaluate, evaluate_scores
from .config import ConfigError, ExperimentConfig, json_schema, load_config, parse_config
from .experiment import (CSV_FIELDS, MetricsRecord, noise_sweep, prepare_data, read_metrics_csv, run_experiment,
                         run_local, write_metrics_csv)

__all__ = [
    "BaselineError", "BaselineResult", "CSV_FIELDS", "ConfigError", "ExperimentConfig", "MetricsRecord",
    "baseline_centralized", "baseline_local", "evaluate", "evaluate_scores", "json_schema", "load_config",
    "noise_sweep", "parse_config", "prepare_data", "read_metrics_csv", "run_experiment", "run_local",
    "write_metrics_csv",
]
