"""Resilient smart-grid fault classification: predictor, attacks, GAN anomaly gate, evaluation harness."""

from faultguard.dataset import (
    DatasetSplit,
    GridWindow,
    NormalizationStats,
    RawRecord,
    WindowSet,
    apply_normalizer,
    fit_normalizer,
    ingest,
    make_windows,
    split,
    synth_dataset,
)
from faultguard.harness import combinatorial_accuracy, false_alarm_probability
from faultguard.predictor import PredictorConfig, PredictorModel, init_model

__version__ = "0.1.0"

__all__ = [
    "DatasetSplit",
    "GridWindow",
    "NormalizationStats",
    "RawRecord",
    "WindowSet",
    "apply_normalizer",
    "fit_normalizer",
    "ingest",
    "make_windows",
    "split",
    "synth_dataset",
    "combinatorial_accuracy",
    "false_alarm_probability",
    "PredictorConfig",
    "PredictorModel",
    "init_model",
]
