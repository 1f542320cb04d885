"""Experiment configuration, sequential protocol runner, result export and CLI."""

from .config import ExperimentConfig, load_config, parse_config
from .report import emit_results, load_results
from .runner import PartialRunError, Prepared, TaskRecord, UnlearnRun, prepare, pretrain_baseline, run_sequence

__all__ = [
    "ExperimentConfig", "load_config", "parse_config", "emit_results", "load_results",
    "PartialRunError", "Prepared", "TaskRecord", "UnlearnRun", "prepare", "pretrain_baseline", "run_sequence",
]
