"""Experiment harness: synthetic data, configuration, training, alpha sweeps, reports and the CLI."""

from .config import ConfigError, ExperimentConfig, load_config, save_config
from .data import Dataset, SyntheticTask, make_dataset, read_dataset, write_dataset
from .pipeline import dataset_for, run_pipeline
from .sweep import read_results, sweep_alpha
from .training import TrainingDiverged, train

__all__ = [
    "ConfigError", "ExperimentConfig", "load_config", "save_config",
    "Dataset", "SyntheticTask", "make_dataset", "read_dataset", "write_dataset",
    "dataset_for", "run_pipeline", "read_results", "sweep_alpha",
    "TrainingDiverged", "train",
]
