from .config import SCHEMA, SWEEP_AXES, ConfigError, RunConfig
from .dv import Bundle, PlannerPolicy, build_dataset, run_train
from .runner import (
    ResultRow,
    ResultsCSV,
    dump_attention,
    format_summary,
    run_eval,
    run_sweep,
    summarize,
    sweep_configs,
    train_or_load,
)

__all__ = [
    "Bundle",
    "ConfigError",
    "PlannerPolicy",
    "ResultRow",
    "ResultsCSV",
    "RunConfig",
    "SCHEMA",
    "SWEEP_AXES",
    "build_dataset",
    "dump_attention",
    "format_summary",
    "run_eval",
    "run_sweep",
    "run_train",
    "summarize",
    "sweep_configs",
    "train_or_load",
]
