"""Rotation and rigid-body calculus on quaternions.

Conventions used throughout the package:

* Quaternions are Hamilton, scalar-first ``[w, x, y, z]``, unit norm, and
  canonicalized to ``w >= 0`` wherever a sign choice matters.
* ``rotate(q, v)`` applies the rotation associated with ``q`` to ``v``;
  ``quat_to_rot(q) @ v`` gives the same result.
* A pose ``T_AB = (q_AB, p_AB)`` maps frame-B coordinates into frame A:
  ``v_A = R(q_AB) v_B + p_AB``.
* Perturbations are applied on the right: ``boxplus(q, phi) = q * exp(phi)``,
  and pose tangents are ordered ``[rotation(3), translation(3)]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Below these angles the closed forms lose precision and Taylor expansions
# take over.
_EXP_LOG_EPS = 1e-8
_GAMMA_EPS = 1e-6

GRAVITY = 9.81


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(a) @ b == cross(a, b)."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def quat_normalize(q: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=float) / np.linalg.norm(q)


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Flip sign so the scalar part is non-negative."""
    q = np.asarray(q, dtype=float)
    return -q if q[0] < 0.0 else q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_inv(q: np.ndarray) -> np.ndarray:
    # Unit quaternions only, so the inverse is the conjugate.
    return quat_conj(q)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the canonical (w >= 0) quaternion."""
    t = np.trace(R)
    if t > 0.0:
        s = np.sqrt(t + 1.0)
        w = 0.5 * s
        s = 0.5 / s
        q = np.array(
            [w, (R[2, 1] - R[1, 2]) * s, (R[0, 2] - R[2, 0]) * s, (R[1, 0] - R[0, 1]) * s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0)
        xi = 0.5 * s
        s = 0.5 / s
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) * s
        q[1 + i] = xi
        q[1 + j] = (R[j, i] + R[i, j]) * s
        q[1 + k] = (R[k, i] + R[i, k]) * s
    return quat_canonical(quat_normalize(q))


def rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply the rotation of q to a 3-vector."""
    qv = np.array([0.0, v[0], v[1], v[2]])
    return quat_mul(quat_mul(q, qv), quat_conj(q))[1:]


def exp_map(phi: np.ndarray) -> np.ndarray:
    """Exponential map from a rotation vector to a unit quaternion."""
    x, y, z = float(phi[0]), float(phi[1]), float(phi[2])
    a2 = x * x + y * y + z * z
    if a2 < _EXP_LOG_EPS * _EXP_LOG_EPS:
        # Second-order expansion of cos(a/2) and sin(a/2)/a.
        w = 1.0 - a2 / 8.0
        s = 0.5 - a2 / 48.0
    else:
        angle = np.sqrt(a2)
        w = np.cos(0.5 * angle)
        s = np.sin(0.5 * angle) / angle
    return np.array([w, s * x, s * y, s * z])


def log_map(q: np.ndarray) -> np.ndarray:
    """Logarithm map from a unit quaternion to a rotation vector (angle <= pi)."""
    w, x, y, z = float(q[0]), float(q[1]), float(q[2]), float(q[3])
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    vn2 = x * x + y * y + z * z
    if vn2 < 1e-24:
        return np.zeros(3)
    vn = np.sqrt(vn2)
    s = 2.0 * np.arctan2(vn, w) / vn
    return np.array([s * x, s * y, s * z])


def boxplus(q: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return quat_mul(q, exp_map(phi))


def boxminus(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Tangent-space difference such that boxplus(q2, boxminus(q1, q2)) == q1."""
    return log_map(quat_mul(quat_inv(q2), q1))


def gamma_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian of the exponential map.

    exp(phi + d) = exp(phi) * exp(gamma_jacobian(phi) @ d) to first order.
    Closed form I - c1 S + c2 S^2 expanded entrywise with
    S^2 = phi phi^T - |phi|^2 I.
    """
    x, y, z = float(phi[0]), float(phi[1]), float(phi[2])
    a2 = x * x + y * y + z * z
    if a2 < _GAMMA_EPS * _GAMMA_EPS:
        c1 = 0.5 - a2 / 24.0
        c2 = 1.0 / 6.0 - a2 / 120.0
    else:
        angle = np.sqrt(a2)
        c1 = (1.0 - np.cos(angle)) / a2
        c2 = (angle - np.sin(angle)) / (a2 * angle)
    d = 1.0 - c2 * a2
    return np.array(
        [
            [d + c2 * x * x, c2 * x * y + c1 * z, c2 * x * z - c1 * y],
            [c2 * x * y - c1 * z, d + c2 * y * y, c2 * y * z + c1 * x],
            [c2 * x * z + c1 * y, c2 * y * z - c1 * x, d + c2 * z * z],
        ]
    )


def gamma_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Closed-form inverse of the right Jacobian: I + S/2 + k S^2."""
    x, y, z = float(phi[0]), float(phi[1]), float(phi[2])
    a2 = x * x + y * y + z * z
    if a2 < _GAMMA_EPS * _GAMMA_EPS:
        k = 1.0 / 12.0 + a2 / 720.0
    else:
        angle = np.sqrt(a2)
        k = 1.0 / a2 - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    d = 1.0 - k * a2
    return np.array(
        [
            [d + k * x * x, k * x * y - 0.5 * z, k * x * z + 0.5 * y],
            [k * x * y + 0.5 * z, d + k * y * y, k * y * z - 0.5 * x],
            [k * x * z - 0.5 * y, k * y * z + 0.5 * x, d + k * z * z],
        ]
    )


def roll_pitch_yaw(q: np.ndarray) -> tuple[float, float, float]:
    """ZYX Euler angles (roll about x, pitch about y, yaw about z)."""
    w, x, y, z = q
    roll = np.arctan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    s = np.clip(2.0 * (w * y - z * x), -1.0, 1.0)
    pitch = np.arcsin(s)
    yaw = np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    return float(roll), float(pitch), float(yaw)


def roll_pitch_jacobian(q: np.ndarray) -> np.ndarray:
    """3x2 map from (roll, pitch) rates to the body-frame rotation tangent.

    Columns are the first two columns of the ZYX Euler-rate matrix, so a
    right-perturbation q * exp(roll_pitch_jacobian(q) @ [dr, dp]) changes the
    extracted roll and pitch by (dr, dp) and leaves yaw fixed, to first order.
    """
    roll, _, _ = roll_pitch_yaw(q)
    cr, sr = np.cos(roll), np.sin(roll)
    return np.array([[1.0, 0.0], [0.0, cr], [0.0, -sr]])


def yaw_quat(yaw: float) -> np.ndarray:
    return np.array([np.cos(0.5 * yaw), 0.0, 0.0, np.sin(0.5 * yaw)])


@dataclass
class Pose:
    """Rigid transform T_AB = (q, p): v_A = R(q) v_B + p."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    def copy(self) -> "Pose":
        return Pose(self.q.copy(), self.p.copy())

    def rotation(self) -> np.ndarray:
        return quat_to_rot(self.q)

    def apply(self, v: np.ndarray) -> np.ndarray:
        return rotate(self.q, v) + self.p

    def compose(self, other: "Pose") -> "Pose":
        return Pose(quat_mul(self.q, other.q), rotate(self.q, other.p) + self.p)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        qi = quat_inv(self.q)
        return Pose(qi, -rotate(qi, self.p))

    def retract(self, xi: np.ndarray) -> "Pose":
        """Right-perturb by a 6-vector [rotation(3), translation(3)]."""
        return Pose(boxplus(self.q, xi[:3]), self.p + xi[3:])

    def local(self, other: "Pose") -> np.ndarray:
        """Tangent xi with other.retract(xi) == self (rotation part exact)."""
        return np.concatenate([boxminus(self.q, other.q), self.p - other.p])

    def to_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation()
        T[:3, 3] = self.p
        return T

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        return Pose(rot_to_quat(T[:3, :3]), T[:3, 3].copy())
