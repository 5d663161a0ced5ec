"""Spectrum-predicting network, its training loop and checkpoints."""

from .network import LambdaOutput, Network, build_fcnn, build_isacnn, build_network
from .training import (Adam, TrainConfig, TrainingDiverged, TrainRun, loss,
                       loss_grad_sigma, predict, predict_batch, train)

__all__ = [
    "LambdaOutput", "Network", "build_fcnn", "build_isacnn", "build_network",
    "Adam", "TrainConfig", "TrainingDiverged", "TrainRun", "loss",
    "loss_grad_sigma", "predict", "predict_batch", "train",
]
