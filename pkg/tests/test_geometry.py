import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crnbev.geometry import (
    BehindNearPlaneError, BevGrid, CameraModel, FrustumGrid, bev_cell_center, bev_cell_of, default_rig,
    depth_to_bin, invert_rigid, project_ego_point, project_points, unproject_pixel,
    yaw_camera_extrinsic,
)

K = np.array([[100.0, 0, 50], [0, 100.0, 30], [0, 0, 1]])


def identity_cam():
    return CameraModel(K, np.eye(4), 100, 60)


def test_principal_axis_projection():
    assert project_ego_point(identity_cam(), (0, 0, 10)) == (50.0, 30.0, 10.0, True)


def test_pinhole_formula():
    u, v, d, _ = project_ego_point(identity_cam(), (1, 0, 10))
    assert (u, v, d) == (60.0, 30.0, 10.0)


def test_behind_near_plane():
    with pytest.raises(BehindNearPlaneError):
        project_ego_point(identity_cam(), (0, 0, 0.05))


def test_out_of_view_is_a_flag():
    *_, in_view = project_ego_point(identity_cam(), (100, 0, 10))
    assert in_view is False


def test_unproject_principal_point():
    assert np.allclose(unproject_pixel(identity_cam(), 50, 30, 7.0), [0, 0, 7.0], atol=0)


def test_unproject_rejects_nonpositive_depth():
    with pytest.raises(ValueError):
        unproject_pixel(identity_cam(), 50, 30, 0.0)


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(np.diag([-1.0, 1, 1]), np.eye(4), 10, 10)
    bad = np.eye(4)
    bad[0, 0] = 2
    with pytest.raises(ValueError):
        CameraModel(K, bad, 10, 10)
    flip = np.diag([1.0, 1, -1, 1])  # reflection, det -1
    with pytest.raises(ValueError):
        CameraModel(K, flip, 10, 10)


def test_camera_dict_round_trip():
    cam = default_rig()[2]
    assert CameraModel.from_dict(cam.to_dict()) == cam
    assert CameraModel.from_dict(cam.to_dict()) != default_rig()[3]


def test_default_rig_layout():
    rig = default_rig()
    assert len(rig) == 6
    for i, cam in enumerate(rig):
        yaw = math.radians(60 * i)
        # a point straight ahead along the camera's yaw lands on the principal point
        u, v, d, ok = project_ego_point(cam, (10 * math.cos(yaw), 10 * math.sin(yaw), 1.5))
        assert ok and abs(u - 352) < 1e-9 and abs(v - 128) < 1e-9 and abs(d - 10) < 1e-9


def test_rig_front_camera_axes():
    front = default_rig()[0]
    # ego +y (left) is image left, ego +z (up) is image up
    u, v, *_ = project_ego_point(front, (10, 1, 1.5))
    assert u < 352
    u, v, *_ = project_ego_point(front, (10, 0, 2.5))
    assert v < 128


@given(st.floats(-math.pi, math.pi), st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 3),
       st.floats(-20, 20), st.floats(-20, 20), st.floats(-5, 5))
def test_rigid_preserves_distances(yaw, tx, ty, tz, x, y, z):
    T = yaw_camera_extrinsic(yaw, (tx, ty, tz))
    p, q = np.array([x, y, z, 1.0]), np.array([0.3, -1.0, 2.0, 1.0])
    a, b = T @ p, T @ q
    ref = np.linalg.norm(p[:3] - q[:3])
    assert abs(np.linalg.norm(a[:3] - b[:3]) - ref) <= 1e-6 * max(ref, 1)
    assert np.allclose(invert_rigid(T) @ a, p, atol=1e-9)


@given(st.integers(0, 5), st.floats(-300, 1000), st.floats(0, 255), st.floats(0.2, 200))
def test_round_trip_property(ci, u, v, d):
    cam = default_rig()[ci]
    p = unproject_pixel(cam, u, v, d)
    u2, v2, d2, _ = project_ego_point(cam, p)
    for a, b in ((u, u2), (v, v2), (d, d2)):
        assert abs(a - b) <= 1e-9 * max(abs(a), 1.0)


def test_project_points_matches_scalar():
    cam = default_rig()[1]
    pts = np.random.default_rng(0).uniform(-30, 30, (50, 3))
    u, v, d, front = project_points(cam, pts)
    for i, p in enumerate(pts):
        if front[i]:
            su, sv, sd, _ = project_ego_point(cam, p)
            assert (su, sv, sd) == pytest.approx((u[i], v[i], d[i]), rel=1e-12)
        else:
            with pytest.raises(BehindNearPlaneError):
                project_ego_point(cam, p)


# --- frustum grid -----------------------------------------------------------


def test_depth_bin_examples():
    g = FrustumGrid.for_image(704, 256)
    assert (g.d_bins, g.feat_w, g.feat_h, g.d_max) == (112, 44, 16, 58.0)
    assert depth_to_bin(g, 2.0) == 0
    assert depth_to_bin(g, 57.99) == 111
    assert depth_to_bin(g, 58.0) is None
    assert depth_to_bin(g, 1.999) is None


@given(st.floats(0, 70), st.floats(0, 70))
def test_depth_bin_monotone(a, b):
    g = FrustumGrid.for_image(704, 256)
    a, b = sorted((a, b))
    ia, ib = depth_to_bin(g, a), depth_to_bin(g, b)
    if ia is not None and ib is not None:
        assert ia <= ib


def test_every_depth_bin_edge_is_half_open():
    g = FrustumGrid.for_image(704, 256)
    for i in range(g.d_bins):
        lo = g.d_min + i * g.d_step
        assert depth_to_bin(g, lo) == i
        assert depth_to_bin(g, np.nextafter(lo + g.d_step, 0)) == i


def test_frustum_grid_needs_whole_stride():
    with pytest.raises(ValueError):
        FrustumGrid.for_image(700, 256)


# --- BEV grid ---------------------------------------------------------------


def test_bev_examples():
    g = BevGrid()
    assert (g.size_x, g.size_y) == (128, 128)
    assert bev_cell_of(g, 0, 0) == (64, 64)
    assert bev_cell_of(g, -51.2, -51.2) == (0, 0)
    assert bev_cell_of(g, 51.2, 0) is None
    assert bev_cell_center(g, 0, 0) == pytest.approx((-50.8, -50.8), abs=1e-12)
    with pytest.raises(ValueError):
        bev_cell_center(g, 128, 0)


def test_bev_inconsistent_size_rejected():
    with pytest.raises(ValueError):
        BevGrid(51.2, 0.8, size_x=100)
    assert BevGrid.square(256).range_m == pytest.approx(102.4)


@given(st.floats(-51.2, 51.2, exclude_max=True), st.floats(-51.2, 51.2, exclude_max=True))
def test_bev_partition(x, y):
    g = BevGrid()
    ix, iy = bev_cell_of(g, x, y)
    x0, y0 = -g.range_m + ix * g.cell_m, -g.range_m + iy * g.cell_m
    assert x0 <= x < x0 + g.cell_m and y0 <= y < y0 + g.cell_m
