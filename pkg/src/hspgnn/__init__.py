"""Physics-incorporated graph neural network imputation for multivariate time series."""

from .data import MissingPattern, SeriesWindow, apply_missing, preprocess, synth_diffusion
from .diffcore import Tensor, backward, grad_check, no_grad
from .estimator import HSPGNNImputer, LinearInterpolationImputer, MeanImputer
from .exceptions import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    DegeneracyError,
    DimensionError,
    HSPGNNError,
    NumericError,
    ParseError,
    ValidationError,
)
from .graphops import GraphSpec, normalized_laplacian
from .model import HSPGNNModel, ModelConfig, TrainConfig, checkpoint_load, checkpoint_save, evaluate, train

__all__ = [
    "CheckpointError",
    "ConfigurationError",
    "ContractError",
    "DegeneracyError",
    "DimensionError",
    "GraphSpec",
    "HSPGNNError",
    "HSPGNNImputer",
    "HSPGNNModel",
    "LinearInterpolationImputer",
    "MeanImputer",
    "MissingPattern",
    "ModelConfig",
    "NumericError",
    "ParseError",
    "SeriesWindow",
    "Tensor",
    "TrainConfig",
    "ValidationError",
    "apply_missing",
    "backward",
    "checkpoint_load",
    "checkpoint_save",
    "evaluate",
    "grad_check",
    "no_grad",
    "normalized_laplacian",
    "preprocess",
    "synth_diffusion",
    "train",
]
