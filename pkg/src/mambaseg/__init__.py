"""Selective state-space U-Net for 2D segmentation, from scratch on numpy."""

from .data import Dataset, SyntheticDatasetSpec, generate_dataset
from .train import TrainConfig, TrainResult, evaluate, predict, train
from .unet import ModelConfig, ModelWeights, forward, init_weights, parameter_count
from .weights_io import load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "ModelConfig",
    "ModelWeights",
    "SyntheticDatasetSpec",
    "TrainConfig",
    "TrainResult",
    "evaluate",
    "forward",
    "generate_dataset",
    "init_weights",
    "load_weights",
    "parameter_count",
    "predict",
    "save_weights",
    "train",
]
