import numpy as np
import pytest

from conftest import numeric_jacobian, random_pose
from vbslam.camera import (
    CameraModel,
    PointBehindCamera,
    reprojection_chain,
    reprojection_chain_many,
)
from vbslam.geom import Pose, exp_map


def default_cam(**kw):
    return CameraModel(**kw)


def distorted_cam():
    return CameraModel(k1=-0.28, k2=0.07, p1=1e-4, p2=-2e-4)


def test_project_principal_axis():
    cam = default_cam()
    np.testing.assert_allclose(cam.project(np.array([0.0, 0.0, 10.0])), [376.0, 240.0])
    np.testing.assert_allclose(cam.project(np.array([0.5, 0.0, 10.0])), [396.0, 240.0])


def test_project_behind_raises():
    cam = default_cam()
    with pytest.raises(PointBehindCamera):
        cam.project(np.array([0.0, 0.0, -1.0]))
    with pytest.raises(PointBehindCamera):
        cam.project(np.array([0.0, 0.0, 0.0]))


def test_project_many_flags(rng):
    cam = default_cam()
    pts = np.array(
        [
            [0.0, 0.0, 10.0],
            [0.0, 0.0, -5.0],
            [100.0, 0.0, 10.0],  # off the sensor
        ]
    )
    uv, valid = cam.project_many(pts)
    assert valid.tolist() == [True, False, False]
    np.testing.assert_allclose(uv[0], [376.0, 240.0])


def test_pinhole_jacobian_on_axis():
    cam = default_cam()
    J = cam.projection_jacobian(np.array([0.0, 0.0, 10.0]))
    np.testing.assert_allclose(J, [[40.0, 0.0, 0.0], [0.0, 40.0, 0.0]], atol=1e-12)


def test_projection_jacobian_scales_inversely_with_depth():
    cam = default_cam()
    J1 = cam.projection_jacobian(np.array([0.1, -0.2, 5.0]))
    J2 = cam.projection_jacobian(np.array([0.2, -0.4, 10.0]))
    np.testing.assert_allclose(J1[:, :2], 2.0 * J2[:, :2], atol=1e-12)


def test_projection_jacobian_matches_fd(rng):
    cam = distorted_cam()
    for _ in range(20):
        m = np.array([rng.uniform(-2, 2), rng.uniform(-1.5, 1.5), rng.uniform(3, 30)])
        J = cam.projection_jacobian(m)
        Jn = numeric_jacobian(lambda x: cam.project(x), m, h=1e-6)
        assert np.max(np.abs(J - Jn)) / max(np.max(np.abs(Jn)), 1.0) < 1e-6


def test_unproject_roundtrip(rng):
    cam = distorted_cam()
    for _ in range(50):
        m = np.array([rng.uniform(-2, 2), rng.uniform(-1.5, 1.5), rng.uniform(3, 30)])
        uv = cam.project(m)
        xn = cam.unproject(uv)
        np.testing.assert_allclose(xn, m[:2] / m[2], atol=1e-9)


def test_reprojection_chain_identity_pose():
    cam = default_cam()
    uv, _, _, valid = reprojection_chain(Pose.identity(), np.array([0.0, 0.0, 10.0]), cam)
    assert valid
    np.testing.assert_allclose(uv, [376.0, 240.0])


def _nadir_cam():
    # Camera mounted looking along -z of the sensor frame.
    q = exp_map(np.array([np.pi, 0.0, 0.0]))  # R = diag(1, -1, -1)
    return CameraModel(T_CS=Pose(q, np.array([0.02, -0.01, -0.05])), k1=-0.1, k2=0.01)


def test_reprojection_chain_jacobians_match_fd(rng):
    cam = _nadir_cam()
    hits = 0
    for _ in range(40):
        T = random_pose(rng, span=2.0, max_angle=0.6)
        m = T.apply(
            cam.T_CS.inverse().apply(
                np.array([rng.uniform(-1, 1), rng.uniform(-0.7, 0.7), rng.uniform(4, 40)])
            )
        )
        uv, J_pose, J_point, valid = reprojection_chain(T, m, cam)
        if not valid:
            continue
        hits += 1

        def f_pose(xi, T=T, m=m):
            uv2, _, _, _ = reprojection_chain(T.retract(xi), m, cam)
            return uv2

        def f_point(d, T=T, m=m):
            uv2, _, _, _ = reprojection_chain(T, m + d, cam)
            return uv2

        Jn_pose = numeric_jacobian(f_pose, np.zeros(6), h=1e-6)
        Jn_point = numeric_jacobian(f_point, np.zeros(3), h=1e-6)
        scale = max(np.max(np.abs(Jn_pose)), 1.0)
        assert np.max(np.abs(J_pose - Jn_pose)) / scale < 1e-5
        assert np.max(np.abs(J_point - Jn_point)) / scale < 1e-5
    assert hits >= 20


def test_reprojection_chain_many_matches_scalar(rng):
    cam = _nadir_cam()
    T = random_pose(rng, span=1.0, max_angle=0.4)
    pts = np.array(
        [
            T.apply(cam.T_CS.inverse().apply(np.array([x, y, z])))
            for x, y, z in rng.uniform([-1, -0.7, 4], [1, 0.7, 30], size=(25, 3))
        ]
    )
    uv_b, J_pose_b, J_point_b, valid_b = reprojection_chain_many(T, pts, cam)
    for i in range(25):
        uv, J_pose, J_point, valid = reprojection_chain(T, pts[i], cam)
        assert valid == valid_b[i]
        if valid:
            np.testing.assert_allclose(uv_b[i], uv, atol=1e-10)
            np.testing.assert_allclose(J_pose_b[i], J_pose, atol=1e-9)
            np.testing.assert_allclose(J_point_b[i], J_point, atol=1e-9)
