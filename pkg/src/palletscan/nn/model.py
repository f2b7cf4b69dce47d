"""The scan classifier network, initialization, backprop and the SGD update."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .layers import (
    Conv2d,
    Dense,
    Flatten,
    Layer,
    MaxPool2d,
    NumericalError,
    ReLU,
    check_finite,
    cross_entropy,
    softmax,
)

MAX_FILTERS = 25


@dataclass(frozen=True)
class ModelConfig:
    """Classifier shape: ``conv_layers`` x (conv 3x3 + ReLU), pool 3/1, FC + ReLU, FC + softmax."""

    conv_layers: int = 1
    filters: int = 15
    fc_hidden: int = 64
    num_classes: int = 2
    input_side: int = 32
    in_channels: int = 1

    def __post_init__(self):
        if self.conv_layers < 1:
            raise ValueError("need at least one convolutional layer")
        if not 1 <= self.filters <= MAX_FILTERS:
            raise ValueError(f"filters per layer must lie in [1, {MAX_FILTERS}]")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.input_side < 3:
            raise ValueError("input_side must be at least 3 for the 3x3 pool")
        if self.fc_hidden < 1 or self.in_channels < 1:
            raise ValueError("fc_hidden and in_channels must be positive")

    @property
    def pooled_side(self) -> int:
        return self.input_side - 2


class Network:
    """A plain layer stack. Holds gradients from the most recent ``backward`` call."""

    def __init__(self, layers: list[Layer], config=None):
        self.layers = list(layers)
        self.config = config

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
            if grad is None:
                break
        return grad

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in declaration order (live references)."""
        return [p for layer in self.layers for _, p in layer.params()]

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in layer.params():
                out.append((f"{i}.{type(layer).__name__.lower()}.{name}", p))
        return out

    def gradients(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads()]

    def copy(self) -> "Network":
        if not isinstance(self.config, ModelConfig):
            return copy.deepcopy(self)
        clone = build_network(self.config)
        for dst, src in zip(clone.parameters(), self.parameters()):
            dst[...] = src
        return clone

    def predict_proba(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Class probabilities for an ``(N, H, W)`` or ``(N, C, H, W)`` batch."""
        x = as_batch(images)
        out = [softmax(self.forward(x[i:i + batch_size])) for i in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0, self.layers[-1].out_features))
        return np.concatenate(out)


def as_batch(images: np.ndarray) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    return x


def build_network(config: ModelConfig) -> Network:
    layers: list[Layer] = []
    channels = config.in_channels
    for i in range(config.conv_layers):
        layers += [Conv2d(channels, config.filters, 3, input_grad=i > 0), ReLU()]
        channels = config.filters
    layers += [
        MaxPool2d(3),
        Flatten(),
        Dense(channels * config.pooled_side ** 2, config.fc_hidden),
        ReLU(),
        Dense(config.fc_hidden, config.num_classes),
    ]
    return Network(layers, config)


def init_parameters(net: Network, seed: int) -> Network:
    """Fan-in scaled uniform weights in ``[-sqrt(6/fan_in), sqrt(6/fan_in)]``; zero biases."""
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        if hasattr(layer, "fan_in"):
            bound = np.sqrt(6.0 / layer.fan_in)
            layer.weight[...] = rng.uniform(-bound, bound, size=layer.weight.shape)
            layer.bias[...] = 0.0
    return net


def init_model(config: ModelConfig, seed: int = 0) -> Network:
    return init_parameters(build_network(config), seed)


def loss_and_backward(net: Network, x: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch; fills every layer's gradients.

    Returns ``(loss, probs)``.
    """
    x = as_batch(x)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    logits = check_finite(net.forward(x), "logits")
    probs = softmax(logits)
    losses = cross_entropy(probs, labels)
    loss = float(np.mean(losses))
    if not np.isfinite(loss):
        raise NumericalError("loss is not finite")
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    net.backward(grad / len(labels))
    return loss, probs


def backward(net: Network, x: np.ndarray, label) -> list[np.ndarray]:
    """Gradient of the cross-entropy loss w.r.t. every parameter, in declaration order."""
    loss_and_backward(net, x, label)
    grads = [g.copy() for g in net.gradients()]
    for g in grads:
        check_finite(g, "gradient")
    return grads


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], learning_rate: float) -> list[np.ndarray]:
    """In-place ``w <- w - lr * g``; returns ``params``."""
    if len(params) != len(grads):
        raise ValueError("parameter and gradient lists differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch: parameter {p.shape} vs gradient {g.shape}")
    for p, g in zip(params, grads):
        p -= learning_rate * g
    return params


# functional views on single layers, mostly handy for tests and notebooks

def conv_forward(x: np.ndarray, layer: Conv2d) -> np.ndarray:
    """``[C, H, W]`` (or batched) input through one convolution layer."""
    single = x.ndim == 3
    out = layer.forward(x[None] if single else x)
    return out[0] if single else out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def maxpool_forward(x: np.ndarray, size: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """3x3 stride-1 max pool of ``[C, H, W]``; also returns flat in-window argmax indices."""
    pool = MaxPool2d(size)
    out = pool.forward(np.asarray(x, dtype=np.float64))
    return out, pool.argmax


def dense_forward(x: np.ndarray, layer: Dense) -> np.ndarray:
    return layer.forward(np.asarray(x, dtype=np.float64))
