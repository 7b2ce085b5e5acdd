"""Branching convolutional digit classifier with homogeneous vector capsule heads."""

from .errors import ConfigError, DimensionError, FormatError, GraphError, HVCError, NumericError
from .estimator import HVCNetClassifier, MnistAugmenter
from .model import HVCNet, ModelConfig, ParamManifest, build
from .predictions import PredictionMatrix
from .train import TrainConfig, lr_at

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DimensionError",
    "FormatError",
    "GraphError",
    "HVCError",
    "HVCNet",
    "HVCNetClassifier",
    "MnistAugmenter",
    "ModelConfig",
    "NumericError",
    "ParamManifest",
    "PredictionMatrix",
    "TrainConfig",
    "build",
    "lr_at",
]
