"""Differentiable building blocks: valid convolution, 2x2 max pooling, ReLU, softmax loss.

Feature maps are ``[H, W, C]`` float64 arrays. Convolution weights are
``[kh, kw, c_in, c_out]`` and follow the cross-correlation convention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ValidationError


@dataclass
class Conv2DLayer:
    weights: np.ndarray  # [kh, kw, c_in, c_out]
    bias: np.ndarray  # [c_out]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 4 or min(self.weights.shape) < 1:
            raise DimensionError(f"conv weights must be [kh,kw,c_in,c_out], got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[3],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[3]} output channels"
            )

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[0], self.weights.shape[1]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]


@dataclass
class LossResult:
    loss: float
    dlogits: np.ndarray


def _check_conv(x, layer):
    if x.ndim != 3:
        raise DimensionError(f"expected [H,W,C] input, got shape {x.shape}")
    kh, kw = layer.kernel_size
    if x.shape[0] < kh or x.shape[1] < kw:
        raise DimensionError(f"input {x.shape[:2]} smaller than kernel {(kh, kw)}")
    if x.shape[2] != layer.in_channels:
        raise DimensionError(f"input has {x.shape[2]} channels, layer expects {layer.in_channels}")


def conv2d_forward(x, layer: Conv2DLayer) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_conv(x, layer)
    kh, kw = layer.kernel_size
    if kh == 1 and kw == 1:
        return x @ layer.weights[0, 0] + layer.bias
    # windows: [Ho, Wo, c_in, kh, kw]
    windows = sliding_window_view(x, (kh, kw), axis=(0, 1))
    w = layer.weights.transpose(2, 0, 1, 3)
    return np.tensordot(windows, w, axes=3) + layer.bias


def conv2d_backward(x, layer: Conv2DLayer, dy, need_dx: bool = True):
    """Return ``(dx, dw, dbias)``; ``dx`` is None when ``need_dx`` is false."""
    x = np.asarray(x, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    _check_conv(x, layer)
    kh, kw = layer.kernel_size
    out_shape = (x.shape[0] - kh + 1, x.shape[1] - kw + 1, layer.out_channels)
    if dy.shape != out_shape:
        raise DimensionError(f"dY shape {dy.shape} does not match forward output {out_shape}")
    dbias = dy.sum(axis=(0, 1))
    if kh == 1 and kw == 1:
        dw = (x.reshape(-1, x.shape[2]).T @ dy.reshape(-1, dy.shape[2]))[None, None]
        dx = dy @ layer.weights[0, 0].T if need_dx else None
        return dx, dw, dbias
    windows = sliding_window_view(x, (kh, kw), axis=(0, 1))
    # [c_in, kh, kw, c_out] -> [kh, kw, c_in, c_out]
    dw = np.tensordot(windows, dy, axes=([0, 1], [0, 1])).transpose(1, 2, 0, 3)
    dx = None
    if need_dx:
        padded = np.pad(dy, ((kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
        dwin = sliding_window_view(padded, (kh, kw), axis=(0, 1))  # [H, W, c_out, kh, kw]
        flipped = layer.weights[::-1, ::-1].transpose(3, 0, 1, 2)  # [c_out, kh, kw, c_in]
        dx = np.tensordot(dwin, flipped, axes=3)
    return dx, dw, dbias


def maxpool2_forward(x):
    """2x2 max pooling; returns the pooled map and the in-window argmax (0..3, row-major)."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[0], x.shape[1]
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial extents, got {(h, w)}")
    win = x.reshape(h // 2, 2, w // 2, 2, *x.shape[2:]).swapaxes(1, 2)
    win = win.reshape(h // 2, w // 2, 4, *x.shape[2:])
    idx = np.argmax(win, axis=2)  # first maximum wins ties
    y = np.take_along_axis(win, idx[:, :, None], axis=2)[:, :, 0]
    return y, idx


def maxpool2_backward(argmax, dy) -> np.ndarray:
    argmax = np.asarray(argmax)
    dy = np.asarray(dy, dtype=np.float64)
    if argmax.shape != dy.shape:
        raise DimensionError(f"argmax shape {argmax.shape} does not match dY {dy.shape}")
    h2, w2 = dy.shape[0], dy.shape[1]
    rest = dy.shape[2:]
    win = np.zeros((h2, w2, 4) + rest)
    np.put_along_axis(win, argmax[:, :, None], dy[:, :, None], axis=2)
    win = win.reshape(h2, w2, 2, 2, *rest).swapaxes(1, 2)
    return win.reshape(2 * h2, 2 * w2, *rest)


def relu(x) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x, dy) -> np.ndarray:
    return np.where(np.asarray(x) > 0, dy, 0.0)


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def softmax_loss(logits, label, floor: float | None = None) -> LossResult:
    """Loss ``logsumexp(z) - <label, z>`` with gradient ``softmax(z) - label``.

    Works on any leading shape; the class axis is last and the loss is summed
    over all fibers. Labels may be sub-stochastic; an all-zero label marks
    background and pushes every logit down.

    With ``floor`` the label deficit ``d = 1 - sum(label)`` contributes
    ``d * (logsumexp(z) - mean(z) + max(mean(z) - floor, 0))``: the
    flattening part is kept and only the pure level push stops once the mean
    logit reaches ``floor``. The objective is then bounded below and the
    gradient equals ``softmax(z) - label`` whenever ``mean(z) > floor``.
    """
    z = np.asarray(logits, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if label.shape != z.shape:
        raise ValidationError(f"label shape {label.shape} does not match logits {z.shape}")
    if np.any(label < 0):
        raise ValidationError("label entries must be non-negative")
    if np.any(label.sum(axis=-1) > 1.0 + 1e-12):
        raise ValidationError("label mass must not exceed 1 per fiber")
    lse = logsumexp(z)
    p = softmax(z)
    loss = lse - np.sum(label * z, axis=-1)
    d = p - label
    if floor is not None:
        deficit = 1.0 - label.sum(axis=-1)
        mean = z.mean(axis=-1)
        inactive = mean <= floor
        loss = loss - np.where(inactive, deficit * (mean - floor), 0.0)
        d = d - np.where(inactive, deficit / z.shape[-1], 0.0)[..., None]
    return LossResult(float(np.sum(loss)), d)
