from .anomaly import AnomalyConfig, ModelCache, anomaly_stack, train_tile_models
from .fill import FillStrategy, fill_missing, fill_values, neighbour_offsets
from .model import (
    CovarianceError,
    KlModel,
    concentration_threshold,
    estimate_covariance,
    load_models,
    model_from_covariance,
    model_from_samples,
    pairwise_covariance,
    project_residual,
    save_models,
    select_truncation,
)

__all__ = [
    "AnomalyConfig", "ModelCache", "anomaly_stack", "train_tile_models",
    "FillStrategy", "fill_missing", "fill_values", "neighbour_offsets",
    "CovarianceError", "KlModel", "concentration_threshold", "estimate_covariance",
    "load_models", "model_from_covariance", "model_from_samples", "pairwise_covariance",
    "project_residual", "save_models", "select_truncation",
]
