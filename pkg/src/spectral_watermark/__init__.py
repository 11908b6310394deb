"""Spectral output watermarking for classifiers, with periodogram-based
detection of the watermark in distilled students."""

__version__ = "0.1.0"

from .errors import (BoundViolationError, ConfigurationError, InsufficientDataError,
                     InvalidInputError, TrainingError, UndefinedMetricError, WatermarkError)
from .wmcore import (WatermarkConfig, WatermarkKey, grad_watermarked_cross_entropy,
                     modified_softmax, project, signal, softmax, watermarked_cross_entropy)
from .spectrum import (FilterPolicy, PairedSeries, Periodogram, SnrReport, extract_signal,
                       fit_sinusoid, frequency_grid, periodogram)
from .datagen import Dataset, make_blobs, sample_queries, split
from .nnet import (Ensemble, Model, TrainConfig, accuracy, distill, ensemble_predict,
                   predict, train_independent, train_teacher)

__all__ = [
    "BoundViolationError", "ConfigurationError", "InsufficientDataError", "InvalidInputError",
    "TrainingError", "UndefinedMetricError", "WatermarkError",
    "WatermarkConfig", "WatermarkKey", "grad_watermarked_cross_entropy", "modified_softmax",
    "project", "signal", "softmax", "watermarked_cross_entropy",
    "FilterPolicy", "PairedSeries", "Periodogram", "SnrReport", "extract_signal",
    "fit_sinusoid", "frequency_grid", "periodogram",
    "Dataset", "make_blobs", "sample_queries", "split",
    "Ensemble", "Model", "TrainConfig", "accuracy", "distill", "ensemble_predict", "predict",
    "train_independent", "train_teacher",
]
