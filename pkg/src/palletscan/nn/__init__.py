"""Minimal numpy CNN: 3x3 convolutions, ReLU, 3x3/1 max-pool, dense layers, softmax."""

from .layers import (
    Conv2d,
    Dense,
    Flatten,
    MaxPool2d,
    NumericalError,
    ReLU,
    check_finite,
    cross_entropy,
    sigmoid,
    softmax,
)
from .model import (
    ModelConfig,
    Network,
    backward,
    build_network,
    conv_forward,
    dense_forward,
    init_model,
    init_parameters,
    loss_and_backward,
    maxpool_forward,
    relu,
    sgd_step,
)
from .weights import WeightFileError, load_classifier, save_classifier

__all__ = [
    "Conv2d", "Dense", "Flatten", "MaxPool2d", "ReLU", "NumericalError", "check_finite",
    "cross_entropy", "sigmoid", "softmax", "ModelConfig", "Network", "backward",
    "build_network", "conv_forward", "dense_forward", "init_model", "init_parameters",
    "loss_and_backward", "maxpool_forward", "relu", "sgd_step", "WeightFileError",
    "load_classifier", "save_classifier",
]
