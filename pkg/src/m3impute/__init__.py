"""Mask-guided bipartite-graph imputation for tabular data."""

from .bench import ExperimentConfig, RunReport, compute_mae, downstream_ols_mae, run_experiment
from .core import ModelConfig, TrainConfig, VARIANTS, fit, predict_matrix
from .dataio import DatasetSchema, generate_mask, load_csv, load_dataset
from .estimator import KNNImputer, M3Imputer, MeanImputer
from .exceptions import M3ImputeError

__version__ = "0.1.0"

__all__ = [
    "DatasetSchema", "ExperimentConfig", "KNNImputer", "M3ImputeError", "M3Imputer",
    "MeanImputer", "ModelConfig", "RunReport", "TrainConfig", "VARIANTS", "compute_mae",
    "downstream_ols_mae", "fit", "generate_mask", "load_csv", "load_dataset", "predict_matrix",
    "run_experiment",
]
