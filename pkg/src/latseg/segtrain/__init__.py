"""Small segmentation network: model, training protocol, sweep harness."""

from .model import (
    MiniUNet,
    ModelConfig,
    ModelWeights,
    bce_loss,
    gradient_check,
    load_weights,
    model_from_weights,
    model_loss_and_grad,
    model_to_weights,
    save_weights,
    snap_to_f32,
)
from .train import TrainConfig, predict, sweep, train

__all__ = [
    "MiniUNet",
    "ModelConfig",
    "ModelWeights",
    "TrainConfig",
    "bce_loss",
    "gradient_check",
    "load_weights",
    "model_from_weights",
    "model_loss_and_grad",
    "model_to_weights",
    "predict",
    "save_weights",
    "snap_to_f32",
    "sweep",
    "train",
]
