import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_jacobian, random_quat
from vbslam import geom
from vbslam.geom import (
    Pose,
    boxminus,
    boxplus,
    exp_map,
    gamma_jacobian,
    log_map,
    quat_canonical,
    quat_mul,
    quat_to_rot,
    roll_pitch_jacobian,
    roll_pitch_yaw,
    rot_to_quat,
    rotate,
    skew,
)

vec3 = st.tuples(*[st.floats(-3.0, 3.0) for _ in range(3)]).map(np.array)
small_angle_vec = st.tuples(*[st.floats(-1.7, 1.7) for _ in range(3)]).map(np.array)


def test_exp_half_turn_about_x():
    q = exp_map(np.array([np.pi, 0.0, 0.0]))
    np.testing.assert_allclose(q, [0.0, 1.0, 0.0, 0.0], atol=1e-12)


def test_exp_zero_is_identity():
    np.testing.assert_allclose(exp_map(np.zeros(3)), [1.0, 0.0, 0.0, 0.0], atol=0)


def test_skew_matches_cross(rng):
    a, b = rng.normal(size=3), rng.normal(size=3)
    np.testing.assert_allclose(skew(a) @ b, np.cross(a, b), atol=1e-14)


@given(small_angle_vec)
def test_log_exp_roundtrip(phi):
    np.testing.assert_allclose(log_map(exp_map(phi)), phi, atol=1e-9)


def test_exp_log_roundtrip_random(rng):
    for _ in range(100):
        q = random_quat(rng)
        q2 = exp_map(log_map(q))
        np.testing.assert_allclose(q2, quat_canonical(q), atol=1e-12)


def test_exp_taylor_branch_continuity():
    # Values straddling the small-angle switch must agree to high precision.
    for mag in (0.5e-8, 2e-8):
        phi = np.array([mag, 0.0, 0.0])
        q = exp_map(phi)
        ref = np.array([np.cos(mag / 2), np.sin(mag / 2), 0.0, 0.0])
        np.testing.assert_allclose(q, ref, atol=1e-16)


def test_quat_mul_associative(rng):
    a, b, c = (random_quat(rng) for _ in range(3))
    np.testing.assert_allclose(
        quat_mul(quat_mul(a, b), c), quat_mul(a, quat_mul(b, c)), atol=1e-12
    )


def test_rotation_matrix_properties(rng):
    for _ in range(20):
        q = random_quat(rng)
        R = quat_to_rot(q)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
        v = rng.normal(size=3)
        np.testing.assert_allclose(rotate(q, v), R @ v, atol=1e-12)


def test_rot_to_quat_roundtrip(rng):
    for _ in range(100):
        q = quat_canonical(random_quat(rng))
        np.testing.assert_allclose(rot_to_quat(quat_to_rot(q)), q, atol=1e-9)


def test_boxplus_boxminus_inverse(rng):
    for _ in range(50):
        q = random_quat(rng)
        phi = rng.uniform(-1.0, 1.0, size=3)
        np.testing.assert_allclose(boxminus(boxplus(q, phi), q), phi, atol=1e-10)


def _gamma_series(phi, terms=20):
    """Reference right Jacobian summed as sum_k (-ad)^k / (k+1)!."""
    A = -skew(phi)
    out = np.eye(3)
    term = np.eye(3)
    fact = 1.0
    for k in range(1, terms):
        term = term @ A
        fact *= k + 1
        out = out + term / fact
    return out


def test_gamma_matches_series():
    for phi in (np.array([0.3, 0.0, 0.0]), np.array([0.2, -0.5, 0.1])):
        np.testing.assert_allclose(gamma_jacobian(phi), _gamma_series(phi), atol=1e-12)


def test_gamma_first_order_property(rng):
    # exp(phi + d) == exp(phi) * exp(Gamma(phi) d) to first order.
    for _ in range(20):
        phi = rng.uniform(-1.5, 1.5, size=3)
        h = 1e-7
        d = rng.normal(size=3)
        lhs = boxminus(exp_map(phi + h * d), exp_map(phi)) / h
        np.testing.assert_allclose(lhs, gamma_jacobian(phi) @ d, atol=1e-6)


def test_gamma_taylor_branch_continuity():
    # The closed form loses ~1e-10 to cancellation right above the switch;
    # both branches must still agree with the series at that level.
    for mag in (0.5e-6, 2e-6):
        phi = np.array([mag, -mag, 0.5 * mag])
        closed = gamma_jacobian(phi * 1.0)
        np.testing.assert_allclose(closed, _gamma_series(phi, terms=6), atol=1e-9)


def test_roll_pitch_yaw_of_axis_rotations():
    r, p, y = roll_pitch_yaw(exp_map(np.array([0.3, 0.0, 0.0])))
    assert (r, p, y) == pytest.approx((0.3, 0.0, 0.0), abs=1e-12)
    r, p, y = roll_pitch_yaw(exp_map(np.array([0.0, 0.2, 0.0])))
    assert (r, p, y) == pytest.approx((0.0, 0.2, 0.0), abs=1e-12)
    r, p, y = roll_pitch_yaw(exp_map(np.array([0.0, 0.0, -1.1])))
    assert (r, p, y) == pytest.approx((0.0, 0.0, -1.1), abs=1e-12)


def test_roll_pitch_jacobian_moves_roll_pitch_only(rng):
    # Perturbing along J_rp columns changes extracted (roll, pitch) by the
    # requested amount and keeps yaw fixed, to first order.
    for _ in range(30):
        q = random_quat(rng, max_angle=1.2)
        J = roll_pitch_jacobian(q)

        def rpy_of(delta, q=q, J=J):
            qq = boxplus(q, J @ delta)
            return np.array(roll_pitch_yaw(qq))

        num = numeric_jacobian(rpy_of, np.zeros(2), h=1e-7)
        np.testing.assert_allclose(num[:2], np.eye(2), atol=1e-6)
        np.testing.assert_allclose(num[2], np.zeros(2), atol=1e-6)


def test_pose_compose_inverse(rng):
    for _ in range(20):
        a = Pose(random_quat(rng), rng.normal(size=3))
        b = Pose(random_quat(rng), rng.normal(size=3))
        v = rng.normal(size=3)
        np.testing.assert_allclose(
            (a @ b).apply(v), a.apply(b.apply(v)), atol=1e-12
        )
        ident = a @ a.inverse()
        np.testing.assert_allclose(ident.p, np.zeros(3), atol=1e-12)
        assert abs(quat_canonical(ident.q)[0]) == pytest.approx(1.0, abs=1e-12)


def test_pose_retract_local_roundtrip(rng):
    for _ in range(20):
        a = Pose(random_quat(rng), rng.normal(size=3))
        xi = rng.uniform(-1.0, 1.0, size=6)
        b = a.retract(xi)
        np.testing.assert_allclose(b.local(a), xi, atol=1e-10)


def test_pose_matrix_roundtrip(rng):
    a = Pose(random_quat(rng), rng.normal(size=3))
    b = Pose.from_matrix(a.to_matrix())
    np.testing.assert_allclose(quat_canonical(b.q), quat_canonical(a.q), atol=1e-9)
    np.testing.assert_allclose(b.p, a.p, atol=1e-12)


@settings(max_examples=30)
@given(small_angle_vec, small_angle_vec)
def test_rotate_composition(phi1, phi2):
    q1, q2 = exp_map(phi1), exp_map(phi2)
    v = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(
        rotate(quat_mul(q1, q2), v), rotate(q1, rotate(q2, v)), atol=1e-10
    )


def test_gravity_constant():
    assert geom.GRAVITY == 9.81
