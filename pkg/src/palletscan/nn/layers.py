"""Layers with hand-written backward passes. Arrays are float64, batch-first ``(N, C, H, W)``."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NumericalError(ArithmeticError):
    """A NaN or infinity showed up where finite values are required."""


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


class Layer:
    """Base class. Stateless layers have no parameters."""

    def params(self) -> list[tuple[str, np.ndarray]]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


class Conv2d(Layer):
    """Stride-1 cross-correlation with ``kernel // 2`` zero padding (shape preserving)."""

    def __init__(self, in_channels: int, filters: int, kernel: int = 3, input_grad: bool = True):
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.in_channels = in_channels
        self.filters = filters
        self.kernel = kernel
        self.padding = kernel // 2
        self.input_grad = input_grad  # off for a first layer fed by raw images
        self.weight = np.zeros((filters, in_channels, kernel, kernel))
        self.bias = np.zeros(filters)
        self.dweight = np.zeros_like(self.weight)
        self.dbias = np.zeros_like(self.bias)
        self._windows = None
        self._shape = None

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel * self.kernel

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def grads(self):
        return [self.dweight, self.dbias]

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"conv expects {self.in_channels} input channels, got shape {x.shape}"
            )
        p, k = self.padding, self.kernel
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, H, W, k, k
        out = np.tensordot(windows, self.weight, axes=([1, 4, 5], [1, 2, 3]))  # N, H, W, F
        out = out.transpose(0, 3, 1, 2) + self.bias[None, :, None, None]
        self._windows = windows
        self._shape = x.shape
        return np.ascontiguousarray(out)

    def backward(self, grad):
        k, p = self.kernel, self.padding
        n, c, h, w = self._shape
        self.dweight[...] = np.tensordot(grad, self._windows, axes=([0, 2, 3], [0, 2, 3]))
        self.dbias[...] = grad.sum(axis=(0, 2, 3))
        if not self.input_grad:
            return None
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + w] += np.tensordot(
                    self.weight[:, :, i, j], grad, axes=([0], [1])
                ).transpose(1, 0, 2, 3)
        return dxp[:, :, p:p + h, p:p + w] if p else dxp


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class MaxPool2d(Layer):
    """Max over ``size x size`` windows at stride 1, so each side shrinks by ``size - 1``.

    Ties go to the leftmost column, then the topmost row, of the window.
    """

    def __init__(self, size: int = 3):
        self.size = size

    def forward(self, x):
        s = self.size
        h, w = x.shape[-2:]
        if h < s or w < s:
            raise ValueError(f"max-pool needs spatial size >= {s}, got {x.shape[-2:]}")
        ho, wo = h - s + 1, w - s + 1
        # separable: best row per column window, then best column; strict > keeps the first.
        # indices ride along as int8 blends, which are far cheaper than np.where here
        rows, row_idx = x[..., 0:ho, :], np.zeros(x.shape[:-2] + (ho, w), dtype=np.int8)
        for i in range(1, s):
            cand = x[..., i:i + ho, :]
            better = (cand > rows).view(np.int8)
            rows = np.maximum(rows, cand)
            row_idx += better * (np.int8(i) - row_idx)
        out = rows[..., 0:wo]
        col_idx = np.zeros(x.shape[:-2] + (ho, wo), dtype=np.int8)
        picked_row = row_idx[..., 0:wo].copy()
        for j in range(1, s):
            cand = rows[..., j:j + wo]
            better = (cand > out).view(np.int8)
            out = np.maximum(out, cand)
            col_idx += better * (np.int8(j) - col_idx)
            picked_row += better * (row_idx[..., j:j + wo] - picked_row)
        base = np.arange(x.size // (h * w))[:, None, None] * (h * w) + (
            np.arange(ho)[:, None] * w + np.arange(wo)[None, :]
        )
        self._src = (base.reshape(out.shape) + picked_row.astype(np.int64) * w + col_idx).ravel()
        self._shape = x.shape
        return out

    @property
    def argmax(self) -> np.ndarray:
        """Flat in-window index (``i * size + j``) of each output's source."""
        w = self._shape[-1]
        within = self._src % (self._shape[-2] * w)
        ho = self._shape[-2] - self.size + 1
        wo = w - self.size + 1
        pos = np.arange(ho)[:, None] * w + np.arange(wo)[None, :]
        rel = within.reshape(-1, ho, wo) - pos
        return ((rel // w) * self.size + rel % w).reshape(self._shape[:-2] + (ho, wo))

    def backward(self, grad):
        dx = np.bincount(self._src, weights=grad.ravel(), minlength=int(np.prod(self._shape)))
        return dx.reshape(self._shape)


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Dense(Layer):
    """``y = x W^T + b`` with ``W`` of shape ``(out, in)``."""

    def __init__(self, in_features: int, out_features: int):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = np.zeros((out_features, in_features))
        self.bias = np.zeros(out_features)
        self.dweight = np.zeros_like(self.weight)
        self.dbias = np.zeros_like(self.bias)

    @property
    def fan_in(self) -> int:
        return self.in_features

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def grads(self):
        return [self.dweight, self.dbias]

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ValueError(f"dense expects {self.in_features} features, got {x.shape[-1]}")
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, grad):
        self.dweight[...] = grad.T @ self._x
        self.dbias[...] = grad.sum(axis=0)
        return grad @ self.weight


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis (max-shifted)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


PROB_FLOOR = 1e-12


def cross_entropy(probs: np.ndarray, label) -> float | np.ndarray:
    """``-log p[label]`` with the probability floored at 1e-12.

    ``probs`` may be one distribution ``(k,)`` with an int label, or a batch
    ``(n, k)`` with an int array of labels (returns per-example losses).
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(label)
    k = probs.shape[-1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range for {k} classes")
    if probs.ndim == 1:
        return float(-np.log(max(probs[int(labels)], PROB_FLOOR)))
    picked = probs[np.arange(len(probs)), labels]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
