"""Tensor primitives: orientation-group channel shifts and plane rotation.

Tensors are plain float64 numpy arrays with the channel axis last.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LayoutError


@dataclass(frozen=True)
class GroupLayout:
    """Channel layout of ``groups`` rotate-groups with ``period`` orientations each.

    Channel ``c`` decomposes as ``c = g * period + o``.
    """

    groups: int
    period: int

    def __post_init__(self):
        if self.groups < 1 or self.period < 1:
            raise LayoutError(f"invalid layout {self.groups}x{self.period}")

    @property
    def channels(self) -> int:
        return self.groups * self.period

    def check(self, channels: int) -> None:
        if channels != self.channels:
            raise LayoutError(
                f"channel extent {channels} does not match layout "
                f"{self.groups} groups x {self.period} orientations"
            )


def cyclic_shift_orientation(x, layout: GroupLayout, t: int, axis: int = -1) -> np.ndarray:
    """Shift orientation channels by ``t`` inside every rotate-group.

    Output channel ``g*p + o`` holds input channel ``g*p + (o - t) mod p``.
    """
    x = np.asarray(x, dtype=np.float64)
    axis = axis % x.ndim
    layout.check(x.shape[axis])
    shape = x.shape[:axis] + (layout.groups, layout.period) + x.shape[axis + 1:]
    y = np.roll(x.reshape(shape), t % layout.period, axis=axis + 1)
    return y.reshape(x.shape)


def _cos_sin(angle_deg: float) -> tuple[float, float]:
    # multiples of 90 degrees must be exact so that quarter turns are permutations
    q, r = divmod(float(angle_deg), 90.0)
    if r == 0.0:
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(q) % 4]
    a = np.deg2rad(angle_deg)
    return float(np.cos(a)), float(np.sin(a))


def bilinear_sample(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    """Sample ``img`` at real coordinates; taps outside the plane read as 0."""
    h, w = img.shape
    y0 = np.floor(sy)
    x0 = np.floor(sx)
    fy = sy - y0
    fx = sx - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    out = np.zeros(sy.shape, dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = np.where(ok, img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], 0.0)
            out += wy * wx * vals
    return out


def affine_resample(src, out_shape, angle_deg: float, src_center, dst_center) -> np.ndarray:
    """Render ``src`` rotated counterclockwise by ``angle_deg`` into a new plane.

    The point ``src_center`` of the source lands on ``dst_center`` of the output.
    Rows grow downward, so counterclockwise is as displayed on screen.
    """
    src = np.asarray(src, dtype=np.float64)
    c, s = _cos_sin(angle_deg)
    yy, xx = np.meshgrid(
        np.arange(out_shape[0], dtype=np.float64),
        np.arange(out_shape[1], dtype=np.float64),
        indexing="ij",
    )
    dy = yy - dst_center[0]
    dx = xx - dst_center[1]
    sx = dx * c - dy * s + src_center[1]
    sy = dx * s + dy * c + src_center[0]
    return bilinear_sample(src, sy, sx)


def rotate_plane(img, angle_deg: float) -> np.ndarray:
    """Rotate a 2-D plane about ((H-1)/2, (W-1)/2) with bilinear resampling."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"rotate_plane expects a 2-D plane, got shape {img.shape}")
    center = ((img.shape[0] - 1) / 2.0, (img.shape[1] - 1) / 2.0)
    return affine_resample(img, img.shape, angle_deg, center, center)
