import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import rotate_plane_scalar, shift_channels_loops
from rinn.errors import LayoutError
from rinn.tensor import GroupLayout, bilinear_sample, cyclic_shift_orientation, rotate_plane

finite = st.floats(-10, 10, allow_nan=False, width=64)


def test_layout_channels_and_check():
    lay = GroupLayout(3, 4)
    assert lay.channels == 12
    lay.check(12)
    with pytest.raises(LayoutError):
        lay.check(11)
    with pytest.raises(LayoutError):
        GroupLayout(0, 2)


def test_shift_three_channels_by_one():
    x = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(cyclic_shift_orientation(x, GroupLayout(1, 3), 1), [3.0, 1.0, 2.0])


def test_shift_stays_inside_groups():
    x = np.arange(6.0)
    np.testing.assert_array_equal(cyclic_shift_orientation(x, GroupLayout(2, 3), 1), [2, 0, 1, 5, 3, 4])


def test_shift_on_other_axis():
    x = np.arange(24.0).reshape(2, 6, 2)
    y = cyclic_shift_orientation(x, GroupLayout(2, 3), 2, axis=1)
    ref = shift_channels_loops(np.moveaxis(x, 1, -1), 2, 3, 2)
    np.testing.assert_array_equal(y, np.moveaxis(ref, -1, 1))


def test_shift_rejects_bad_extent():
    with pytest.raises(LayoutError):
        cyclic_shift_orientation(np.zeros((2, 2, 5)), GroupLayout(2, 3), 1)


@given(
    m=st.integers(1, 4), p=st.integers(1, 6), t=st.integers(-20, 20), data=st.data()
)
def test_shift_matches_loops(m, p, t, data):
    x = data.draw(arrays(np.float64, (3, m * p), elements=finite))
    np.testing.assert_array_equal(cyclic_shift_orientation(x, GroupLayout(m, p), t), shift_channels_loops(x, m, p, t))


@given(m=st.integers(1, 3), p=st.integers(1, 6), t1=st.integers(-9, 9), t2=st.integers(-9, 9), data=st.data())
def test_shift_group_laws(m, p, t1, t2, data):
    lay = GroupLayout(m, p)
    x = data.draw(arrays(np.float64, (2, 2, m * p), elements=finite))
    composed = cyclic_shift_orientation(cyclic_shift_orientation(x, lay, t2), lay, t1)
    np.testing.assert_array_equal(composed, cyclic_shift_orientation(x, lay, t1 + t2))
    np.testing.assert_array_equal(cyclic_shift_orientation(x, lay, 0), x)
    np.testing.assert_array_equal(cyclic_shift_orientation(x, lay, p), x)
    assert math.fsum(cyclic_shift_orientation(x, lay, t1).ravel()) == math.fsum(x.ravel())


def test_rotate_zero_is_identity(rng):
    x = rng.random((7, 9))
    np.testing.assert_array_equal(rotate_plane(x, 0.0), x)


def test_rotate_horizontal_line_quarter_turn():
    x = np.array([[0, 0, 0], [1, 1, 1], [0, 0, 0]], dtype=float)
    np.testing.assert_array_equal(rotate_plane(x, 90.0), [[0, 1, 0], [0, 1, 0], [0, 1, 0]])


def test_rotate_is_counterclockwise_on_screen():
    # a dot right of center moves above center
    x = np.zeros((5, 5))
    x[2, 4] = 1.0
    y = rotate_plane(x, 90.0)
    assert y[0, 2] == 1.0 and y.sum() == 1.0


def test_rotate_delta_45_against_scalar_oracle():
    x = np.zeros((5, 5))
    x[2, 4] = 1.0
    y = rotate_plane(x, 45.0)
    np.testing.assert_allclose(y, rotate_plane_scalar(x, 45.0), rtol=0, atol=1e-12)
    # the delta lands between pixels and four outputs pull from it
    assert np.count_nonzero(y > 1e-12) == 4


@given(angle=st.floats(-720, 720, allow_nan=False), data=st.data())
def test_rotate_matches_scalar_oracle(angle, data):
    h = data.draw(st.integers(2, 7))
    w = data.draw(st.integers(2, 7))
    x = data.draw(arrays(np.float64, (h, w), elements=st.floats(0, 1)))
    np.testing.assert_allclose(rotate_plane(x, angle), rotate_plane_scalar(x, angle), rtol=0, atol=1e-12)


@pytest.mark.parametrize("quarter", [1, 2, 3])
@pytest.mark.parametrize("shape", [(5, 5), (7, 7), (9, 9)])
def test_quarter_turns_are_exact_permutations(rng, quarter, shape):
    x = rng.normal(size=shape)
    np.testing.assert_array_equal(rotate_plane(x, 90.0 * quarter), np.rot90(x, quarter))


def _smooth_field(seed, size=21, waves=4):
    # a few low-frequency cosines; image-like content rather than pixel noise
    r = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size] / size
    x = np.zeros((size, size))
    for _ in range(waves):
        fy, fx = r.uniform(-2, 2, size=2)
        x += r.normal() * np.cos(2 * np.pi * (fy * yy + fx * xx) + r.uniform(0, 2 * np.pi))
    return x


@given(angle=st.floats(0, 360), seed=st.integers(0, 2**16))
def test_rotate_round_trip_on_interior(angle, seed):
    x = _smooth_field(seed)
    back = rotate_plane(rotate_plane(x, angle), -angle)
    yy, xx = np.mgrid[:21, :21]
    disk = np.hypot(yy - 10, xx - 10) <= 21 / 2 - 2
    assert np.max(np.abs(back - x)[disk]) <= 0.25 * np.max(np.abs(x))


def test_bilinear_sample_outside_reads_zero():
    img = np.ones((3, 3))
    out = bilinear_sample(img, np.array([-1.0, 1.0, 1.5]), np.array([1.0, 3.5, 2.5]))
    np.testing.assert_allclose(out, [0.0, 0.0, 0.5])
