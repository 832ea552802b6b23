import numpy as np
import pytest

from conftest import random_quat
from vbslam.geom import Pose, boxminus, exp_map, log_map, quat_mul
from vbslam.spline import (
    bspline_basis,
    bspline_cumulative_weights,
    bspline_weights,
    cumulative_weights,
    interpolate_pose,
    interpolation_jacobians,
    locate,
    segment_control_indices,
    z_basis,
    z_cumulative_weights,
    z_weights,
)


def test_z_basis_anchor_values():
    assert z_basis(0.0) == pytest.approx(1.0, abs=0)
    for s in (1.0, -1.0, 2.0, -2.0, 2.5, -3.0):
        assert z_basis(s) == pytest.approx(0.0, abs=1e-15)


def test_z_basis_known_midpoints():
    assert z_basis(0.5) == pytest.approx(0.5625, abs=1e-15)
    assert z_basis(1.5) == pytest.approx(-0.0625, abs=1e-15)


def test_z_weights_midpoint():
    np.testing.assert_allclose(
        z_weights(0.5), [-0.0625, 0.5625, 0.5625, -0.0625], atol=1e-15
    )


def test_partition_of_unity_dense_grid():
    u = np.linspace(0.0, 1.0, 1000)
    total = z_basis(u + 1.0) + z_basis(u) + z_basis(u - 1.0) + z_basis(u - 2.0)
    assert np.max(np.abs(total - 1.0)) <= 1e-12


def test_cumulative_weights_at_knot():
    np.testing.assert_allclose(z_cumulative_weights(0.0), [1.0, 1.0, 0.0, 0.0], atol=0)
    np.testing.assert_allclose(
        z_cumulative_weights(0.5), [1.0, 1.0625, 0.5, -0.0625], atol=1e-15
    )


def test_bspline_basis_values():
    # Cardinal cubic B-spline: 2/3 at the center, 1/6 at unit offset.
    assert bspline_basis(0.0) == pytest.approx(4.0 / 6.0, abs=1e-14)
    assert bspline_basis(1.0) == pytest.approx(1.0 / 6.0, abs=1e-14)
    assert bspline_basis(-1.0) == pytest.approx(1.0 / 6.0, abs=1e-14)
    assert bspline_basis(2.0) == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(
        bspline_weights(0.0), [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0, 0.0], atol=1e-14
    )
    np.testing.assert_allclose(
        bspline_cumulative_weights(0.0), [1.0, 5.0 / 6.0, 1.0 / 6.0, 0.0], atol=1e-14
    )


def test_bspline_partition_of_unity():
    u = np.linspace(0.0, 1.0, 500)
    total = sum(bspline_basis(u - k) for k in (-1.0, 0.0, 1.0, 2.0))
    assert np.max(np.abs(total - 1.0)) <= 1e-12


def _line_poses():
    return [Pose(p=np.array([float(j), 0.0, 0.0])) for j in range(4)]


def test_translation_linear_reproduction():
    poses = _line_poses()
    for u in np.linspace(0.0, 1.0, 41):
        p = interpolate_pose(poses, u).p
        np.testing.assert_allclose(p, [1.0 + u, 0.0, 0.0], atol=1e-10)
    assert interpolate_pose(poses, 0.5).p[0] == pytest.approx(1.5, abs=1e-12)


def test_bspline_does_not_interpolate_generic_knots(rng):
    poses = [Pose(p=rng.normal(size=3) * 3.0) for _ in range(4)]
    p = interpolate_pose(poses, 0.0, basis="bspline").p
    assert np.linalg.norm(p - poses[1].p) > 1e-3


def test_knot_interpolation_exact(rng):
    for _ in range(10):
        poses = [Pose(random_quat(rng, 1.5), rng.normal(size=3) * 4.0) for _ in range(4)]
        at = interpolate_pose(poses, 0.0)
        np.testing.assert_allclose(at.p, poses[1].p, atol=1e-12)
        assert np.linalg.norm(boxminus(at.q, poses[1].q)) < 1e-10
        at_end = interpolate_pose(poses, 1.0)
        np.testing.assert_allclose(at_end.p, poses[2].p, atol=1e-12)
        assert np.linalg.norm(boxminus(at_end.q, poses[2].q)) < 1e-10


def test_single_axis_rotation_matches_scalar_spline(rng):
    # With all control rotations about one axis the interpolant reduces to a
    # scalar Z-spline on the angles.
    axis = np.array([0.0, 0.0, 1.0])
    angles = rng.uniform(-0.8, 0.8, size=4)
    poses = [Pose(exp_map(axis * a)) for a in angles]
    for u in np.linspace(0.0, 1.0, 17):
        q = interpolate_pose(poses, u).q
        w = z_weights(u)
        theta = float(w @ angles)
        assert np.linalg.norm(boxminus(q, exp_map(axis * theta))) < 1e-9


def _random_smooth_poses(rng, n=5):
    poses = [Pose(random_quat(rng, 0.8), rng.normal(size=3) * 2.0)]
    for _ in range(n - 1):
        dq = exp_map(rng.uniform(-0.3, 0.3, size=3))
        poses.append(Pose(quat_mul(poses[-1].q, dq), poses[-1].p + rng.normal(size=3)))
    return poses


def test_c1_continuity_across_knot(rng):
    # Second-order one-sided stencils for the left/right derivative limits
    # at the shared knot; truncation error is O(h^2).
    for basis in ("z", "bspline"):
        poses = _random_smooth_poses(rng, 5)
        h = 1e-4
        at = interpolate_pose(poses[:4], 1.0, basis)

        def p_left(s):
            return interpolate_pose(poses[:4], 1.0 + s, basis).p

        def p_right(s):
            return interpolate_pose(poses[1:], s, basis).p

        def q_tangent_left(s):
            return boxminus(interpolate_pose(poses[:4], 1.0 + s, basis).q, at.q)

        def q_tangent_right(s):
            return boxminus(interpolate_pose(poses[1:], s, basis).q, at.q)

        v_left = (-4.0 * p_left(-h) + p_left(-2 * h) + 3.0 * at.p) / (2 * h)
        v_right = (4.0 * p_right(h) - p_right(2 * h) - 3.0 * at.p) / (2 * h)
        np.testing.assert_allclose(v_left, v_right, atol=1e-6)
        w_left = (-4.0 * q_tangent_left(-h) + q_tangent_left(-2 * h)) / (2 * h)
        w_right = (4.0 * q_tangent_right(h) - q_tangent_right(2 * h)) / (2 * h)
        np.testing.assert_allclose(w_left, w_right, atol=1e-6)


def test_interpolation_jacobians_match_fd(rng):
    for basis in ("z", "bspline"):
        for _ in range(5):
            poses = _random_smooth_poses(rng, 4)
            u = rng.uniform(0.05, 0.95)
            pose, tw, rj = interpolation_jacobians(poses, u, basis)
            base = interpolate_pose(poses, u, basis)
            assert np.linalg.norm(boxminus(pose.q, base.q)) < 1e-12
            h = 1e-7
            for c in range(4):
                for k in range(3):
                    d = np.zeros(3)
                    d[k] = h
                    bumped = [p.copy() for p in poses]
                    bumped[c] = Pose(quat_mul(poses[c].q, exp_map(d)), poses[c].p)
                    dq = boxminus(interpolate_pose(bumped, u, basis).q, pose.q) / h
                    np.testing.assert_allclose(dq, rj[c][:, k], atol=2e-5)
                    bumped[c] = Pose(poses[c].q, poses[c].p + d)
                    dp = (interpolate_pose(bumped, u, basis).p - pose.p) / h
                    expect = np.zeros(3)
                    expect[k] = tw[c]
                    np.testing.assert_allclose(dp, expect, atol=1e-6)


def test_translation_jacobian_weights_sum_to_one(rng):
    for u in rng.uniform(0.0, 1.0, size=10):
        _, tw, _ = interpolation_jacobians(_line_poses(), float(u))
        assert float(np.sum(tw)) == pytest.approx(1.0, abs=1e-12)


def test_segment_control_indices_clamped():
    assert segment_control_indices(0, 6) == [0, 0, 1, 2]
    assert segment_control_indices(2, 6) == [1, 2, 3, 4]
    assert segment_control_indices(4, 6) == [3, 4, 5, 5]


def test_locate():
    assert locate(0.0, 0.0, 0.15, 10) == (0, 0.0)
    i, u = locate(0.31, 0.0, 0.15, 10)
    assert i == 2 and u == pytest.approx(0.31 / 0.15 - 2.0)
    assert locate(-0.1, 0.0, 0.15, 10) is None
    assert locate(1.36, 0.0, 0.15, 10) is None
    i, u = locate(1.35, 0.0, 0.15, 10)
    assert i == 8 and u == pytest.approx(1.0)
