"""Cyclic convolutional layer.

The layer convolves over (y, x, orientation) with a kernel spanning every
channel of the input, once per orientation offset ``t``. Orientation padding
wraps around inside each rotate-group instead of padding with zeros, so a
cyclic shift of the input orientations becomes a shift of the output
orientation axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, LayoutError
from .layers import Conv2DLayer, conv2d_backward, conv2d_forward
from .tensor import GroupLayout, cyclic_shift_orientation


@dataclass
class CyclicConvLayer:
    kernels: np.ndarray  # [sh, sw, m * p, k]
    bias: np.ndarray  # [k]
    layout: GroupLayout

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kernels.ndim != 4:
            raise LayoutError(f"cyclic kernels must be [sh,sw,m*p,k], got {self.kernels.shape}")
        self.layout.check(self.kernels.shape[2])
        if self.bias.shape != (self.kernels.shape[3],):
            raise DimensionError("cyclic bias does not match kernel count")

    @property
    def kernel_count(self) -> int:
        return self.kernels.shape[3]

    def as_conv(self) -> Conv2DLayer:
        return Conv2DLayer(self.kernels, self.bias)


def _offset_input(x, layout, t):
    # channel g*p + o of the result holds x[g*p + (o + t) mod p]
    return np.ascontiguousarray(cyclic_shift_orientation(x, layout, -t))


def cyclic_conv_forward(x, layer: CyclicConvLayer) -> np.ndarray:
    """Return ``[H', W', k, p]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"expected [H,W,C] input, got {x.shape}")
    layer.layout.check(x.shape[2])
    conv = layer.as_conv()
    outs = [conv2d_forward(_offset_input(x, layer.layout, t), conv) for t in range(layer.layout.period)]
    return np.stack(outs, axis=-1)


def cyclic_conv_backward(x, layer: CyclicConvLayer, dy, need_dx: bool = True):
    x = np.asarray(x, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    layer.layout.check(x.shape[2])
    sh, sw = layer.kernels.shape[:2]
    p = layer.layout.period
    expected = (x.shape[0] - sh + 1, x.shape[1] - sw + 1, layer.kernel_count, p)
    if dy.shape != expected:
        raise DimensionError(f"dY shape {dy.shape} does not match forward output {expected}")
    conv = layer.as_conv()
    dx = np.zeros_like(x) if need_dx else None
    dk = np.zeros_like(layer.kernels)
    db = np.zeros_like(layer.bias)
    for t in range(p):
        dxt, dkt, dbt = conv2d_backward(
            _offset_input(x, layer.layout, t), conv, np.ascontiguousarray(dy[..., t]), need_dx
        )
        dk += dkt
        db += dbt
        if need_dx:
            dx += cyclic_shift_orientation(dxt, layer.layout, t)
    return dx, dk, db


def identity_init(layout: GroupLayout) -> CyclicConvLayer:
    """1x1 layer with one kernel per group copying that group's orientation-0 channel."""
    m, p = layout.groups, layout.period
    kernels = np.zeros((1, 1, m * p, m))
    kernels[0, 0, np.arange(m) * p, np.arange(m)] = 1.0
    return CyclicConvLayer(kernels, np.zeros(m), layout)
