import numpy as np
import pytest

from vbslam.geom import Pose, exp_map, quat_normalize


def numeric_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian of f: R^n -> R^m at x."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(np.asarray(f(x), dtype=float))
    J = np.zeros((f0.size, x.size))
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        fp = np.atleast_1d(np.asarray(f(xp), dtype=float))
        fm = np.atleast_1d(np.asarray(f(xm), dtype=float))
        J[:, j] = (fp - fm) / (2.0 * h)
    return J


def rel_error(A, B):
    A, B = np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    denom = max(np.max(np.abs(B)), 1.0)
    return np.max(np.abs(A - B)) / denom


def random_quat(rng, max_angle=np.pi - 0.2):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    return quat_normalize(exp_map(axis * angle))


def random_pose(rng, span=5.0, max_angle=np.pi - 0.2):
    return Pose(random_quat(rng, max_angle), rng.uniform(-span, span, size=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
