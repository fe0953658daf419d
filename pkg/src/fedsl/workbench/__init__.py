"""Experiment plumbing: data, configs, run/sweep drivers, CSV output, CLI."""

from fedsl.metrics import CSV_COLUMNS, MetricsRow, MetricsTable
from fedsl.workbench.config import ExperimentConfig, from_dict, load_config, loads
from fedsl.workbench.data import Dataset, gen_blobs, partition_dirichlet, partition_uniform
from fedsl.workbench.runner import (
    build_setup,
    final_rows,
    read_csv,
    run_experiment,
    sweep,
    table_to_csv,
    write_csv,
)

__all__ = [
    "CSV_COLUMNS",
    "Dataset",
    "ExperimentConfig",
    "MetricsRow",
    "MetricsTable",
    "build_setup",
    "final_rows",
    "from_dict",
    "gen_blobs",
    "load_config",
    "loads",
    "partition_dirichlet",
    "partition_uniform",
    "read_csv",
    "run_experiment",
    "sweep",
    "table_to_csv",
    "write_csv",
]
