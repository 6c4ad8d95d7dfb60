"""Field-level probability calibration.

AdaCalib learns one monotone piecewise-linear calibration map per field value,
guided by per-bin posterior statistics, and picks the bin count per field
value with a Gumbel-softmax selector. Classical global calibrators, a metric
suite and a synthetic ground-truth generator are included for comparison.
"""

from __future__ import annotations

from .adacalib import AdaCalibModel, InsufficientDataError, TrainConfig, export_unified, load_model, load_unified, save_model
from .baselines import CalibrationFitError, fit_baseline
from .binning import GLOBAL, fit_field_binning
from .data import Dataset, DataFormatError, Sample, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .metrics import EvalReport, auc, field_auc, field_rce, log_loss

__version__ = "0.1.0"

__all__ = [
    "AdaCalibModel",
    "CalibrationFitError",
    "DataFormatError",
    "Dataset",
    "EvalReport",
    "GLOBAL",
    "InsufficientDataError",
    "Sample",
    "SyntheticSpec",
    "TrainConfig",
    "auc",
    "export_unified",
    "field_auc",
    "field_rce",
    "fit_baseline",
    "fit_field_binning",
    "generate_synthetic",
    "load_dataset",
    "load_model",
    "load_unified",
    "log_loss",
    "save_dataset",
    "save_model",
]
