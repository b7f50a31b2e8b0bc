"""Expansion of trained base kernels into banks of rotated copies.

A bank built from ``m`` base kernels with period ``p`` stores the copy of base
kernel ``i`` rotated by ``j * 360 / n`` degrees at output channel ``i * p + j``.
When the kernels consume an orientation-structured feature map, the input
channels of copy ``j`` are also cycled by ``j`` inside every input group, which
keeps the layer equivariant: rotating the input by one step shifts every
output group by one orientation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, LayoutError
from .tensor import GroupLayout, cyclic_shift_orientation, rotate_plane


@dataclass
class BaseBank:
    kernels: np.ndarray  # [kh, kw, c_in, m]
    input_layout: GroupLayout

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=np.float64)
        if self.kernels.ndim != 4:
            raise LayoutError(f"base kernels must be [kh,kw,c_in,m], got {self.kernels.shape}")
        self.input_layout.check(self.kernels.shape[2])

    @property
    def count(self) -> int:
        return self.kernels.shape[3]


@dataclass
class RotatedBank:
    kernels: np.ndarray  # [kh, kw, c_in, m * p]
    base_count: int
    period: int
    step_deg: float

    @property
    def layout(self) -> GroupLayout:
        return GroupLayout(self.base_count, self.period)


def rotate_kernel(k, angle_deg: float, input_layout: GroupLayout, shift: int) -> np.ndarray:
    """Rotate every input-channel plane of ``k`` and cycle the channels by ``shift``."""
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 3:
        raise LayoutError(f"kernel must be [kh,kw,c_in], got {k.shape}")
    input_layout.check(k.shape[2])
    if input_layout.period == 1:
        shift = 0
    out = np.stack([rotate_plane(k[:, :, c], angle_deg) for c in range(k.shape[2])], axis=2)
    if shift % input_layout.period:
        out = cyclic_shift_orientation(out, input_layout, shift, axis=2)
    return out


def expand_bank(base: BaseBank, n: int, p: int) -> RotatedBank:
    if n < 1 or p < 1 or n % p:
        raise ConfigurationError(f"period {p} must divide orientation resolution {n}")
    kh, kw, c_in, m = base.kernels.shape
    step = 360.0 / n
    prev = base.input_layout
    out = np.empty((kh, kw, c_in, m * p))
    for i in range(m):
        for j in range(p):
            out[:, :, :, i * p + j] = rotate_kernel(
                base.kernels[:, :, :, i], j * step, prev, j % prev.period
            )
    return RotatedBank(out, m, p, step)


def symmetrize_kernel(k, order: int) -> np.ndarray:
    """Project a kernel onto its ``order``-fold rotationally symmetric part (order 1 or 2)."""
    k = np.asarray(k, dtype=np.float64)
    if order == 1:
        return k.copy()
    if order != 2:
        raise ConfigurationError(f"unsupported symmetry order {order}")
    return 0.5 * (k + k[::-1, ::-1])
