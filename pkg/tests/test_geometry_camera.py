"""Ego-frame transforms, pinhole projection, and image rescaling."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from cubefusion.camera import (CameraFrame, forward_camera_rotation,
                               project_ego_points, resize_image, resized_size,
                               scaled_intrinsics)
from cubefusion.geometry import (cartesian_to_polar, polar_to_cartesian,
                                 wrap_angle, yaw_rotation)


def test_polar_axis_points():
    assert_allclose(polar_to_cartesian([5.0, 0.0, 0.0]), [5.0, 0.0, 0.0])
    assert_allclose(polar_to_cartesian([3.0, math.pi / 2, 0.0]),
                    [0.0, 3.0, 0.0], atol=1e-12)
    assert_allclose(polar_to_cartesian([2.0, 0.0, math.pi / 2]),
                    [0.0, 0.0, 2.0], atol=1e-12)


def test_cartesian_origin_maps_to_zero_angles():
    assert_allclose(cartesian_to_polar([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0])


@given(st.floats(0.1, 100.0), st.floats(-3.1, 3.1), st.floats(-1.5, 1.5))
@settings(max_examples=50, deadline=None)
def test_polar_cartesian_round_trip(r, az, el):
    polar = np.array([r, az, el])
    back = cartesian_to_polar(polar_to_cartesian(polar))
    assert_allclose(back, polar, atol=1e-9)


@given(st.floats(-50.0, 50.0))
@settings(max_examples=100, deadline=None)
def test_wrap_angle_range_and_periodicity(theta):
    w = wrap_angle(theta)
    assert -math.pi <= w < math.pi
    assert_allclose(math.sin(w), math.sin(theta), atol=1e-9)
    assert_allclose(math.cos(w), math.cos(theta), atol=1e-9)
    assert_allclose(wrap_angle(theta + 2 * math.pi), w, atol=1e-9)


def test_yaw_rotation_quarter_turn():
    rot = yaw_rotation(math.pi / 2)
    assert_allclose(rot @ [1.0, 0.0], [0.0, 1.0], atol=1e-12)
    assert_allclose(rot @ rot.T, np.eye(2), atol=1e-12)


def _rig():
    intr = np.array([[100.0, 0.0, 80.0], [0.0, 100.0, 48.0], [0.0, 0.0, 1.0]])
    return intr, forward_camera_rotation(), np.zeros(3), 160, 96


def test_optical_axis_hits_principal_point():
    intr, rot, t, w, h = _rig()
    uv, valid = project_ego_points([[10.0, 0.0, 0.0]], intr, rot, t, w, h)
    assert valid[0]
    assert_allclose(uv[0], [80.0, 48.0])


def test_point_behind_camera_is_invalid():
    intr, rot, t, w, h = _rig()
    uv, valid = project_ego_points([[-4.0, 0.0, 0.0]], intr, rot, t, w, h)
    assert not valid[0]


def test_hand_evaluated_projection_chain():
    # r=10, az=0.1, el=0: ego (10cos0.1, 10sin0.1, 0); the forward camera
    # maps ego (x,y,z) to (-y, -z, x), so u = cx - fx*tan(0.1), v = cy.
    intr, rot, t, w, h = _rig()
    point = polar_to_cartesian([10.0, 0.1, 0.0])
    uv, valid = project_ego_points([point], intr, rot, t, w, h)
    assert valid[0]
    assert_allclose(uv[0, 0], 80.0 - 100.0 * math.tan(0.1), atol=1e-9)
    assert_allclose(uv[0, 1], 48.0, atol=1e-9)


def test_image_bounds_are_half_open():
    intr, rot, t, w, h = _rig()
    # u = cx - fx*y/x; choose y to land exactly on each boundary
    on_low = [[100.0, (80.0 + 0.5), 0.0]]   # u = 80 - 80.5 = -0.5
    uv, valid = project_ego_points(on_low, intr, rot, t, w, h)
    assert_allclose(uv[0, 0], -0.5)
    assert valid[0]
    on_high = [[100.0, -(w - 80.0 - 0.5), 0.0]]  # u = w - 0.5
    uv, valid = project_ego_points(on_high, intr, rot, t, w, h)
    assert_allclose(uv[0, 0], w - 0.5)
    assert not valid[0]


def test_forward_rotation_is_orthonormal():
    rot = forward_camera_rotation()
    assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)
    assert_allclose(np.linalg.det(rot), 1.0)


def _frame(h=64, w=128):
    rng = np.random.default_rng(3)
    intr = np.array([[90.0, 0.0, w / 2], [0.0, 90.0, h / 2], [0.0, 0.0, 1.0]])
    return CameraFrame(pixels=rng.uniform(0, 1, (h, w, 3)), intrinsics=intr,
                       rotation=forward_camera_rotation(),
                       translation=np.zeros(3))


def test_camera_frame_validation():
    frame = _frame()
    with pytest.raises(ValueError):
        CameraFrame(pixels=frame.pixels, intrinsics=frame.intrinsics,
                    rotation=np.eye(3) * 2.0, translation=np.zeros(3))
    bad_intr = frame.intrinsics.copy()
    bad_intr[0, 2] = 1e4
    with pytest.raises(ValueError):
        CameraFrame(pixels=frame.pixels, intrinsics=bad_intr,
                    rotation=frame.rotation, translation=np.zeros(3))


def test_resized_size_halving_example():
    assert resized_size(2048, 1024, 512) == (1024, 512)


def test_resize_identity_when_height_matches():
    frame = _frame()
    assert resize_image(frame, frame.height) is frame


def test_resize_constant_image_stays_constant():
    frame = _frame()
    frame.pixels[:] = 0.37
    out = resize_image(frame, 32)
    assert out.pixels.shape == (32, 64, 3)
    assert_allclose(out.pixels, 0.37, atol=1e-7)


def test_resize_halves_intrinsics():
    frame = _frame(64, 128)
    out = resize_image(frame, 32)
    assert_allclose(out.intrinsics[0, 0], frame.intrinsics[0, 0] / 2)
    assert_allclose(out.intrinsics[1, 2], frame.intrinsics[1, 2] / 2)


def test_projection_commutes_with_resize():
    frame = _frame(64, 128)
    out = resize_image(frame, 32)
    points = polar_to_cartesian(np.array([[12.0, 0.15, 0.02],
                                          [30.0, -0.3, -0.05]]))
    uv_full, valid_full = project_ego_points(points, frame.intrinsics,
                                             frame.rotation, frame.translation,
                                             frame.width, frame.height)
    uv_small, valid_small = project_ego_points(points, out.intrinsics,
                                               out.rotation, out.translation,
                                               out.width, out.height)
    assert valid_full.all() and valid_small.all()
    assert_allclose(uv_small, uv_full * 0.5, atol=1e-4)


def test_scaled_intrinsics_rows():
    k = np.array([[100.0, 0.0, 60.0], [0.0, 80.0, 40.0], [0.0, 0.0, 1.0]])
    out = scaled_intrinsics(k, 120, 80, 60, 20)
    assert_allclose(out[0], [50.0, 0.0, 30.0])
    assert_allclose(out[1], [0.0, 20.0, 10.0])
    assert_allclose(out[2], [0.0, 0.0, 1.0])
