"""Interpolating Z-spline and reference cubic B-spline on SE(3).

A trajectory is represented by a sequence of base poses at uniform intervals
``dt``.  A pose at time ``t`` between knots ``i`` and ``i+1`` is blended from
the four surrounding base poses ``(i-1, i, i+1, i+2)`` with segment-local
parameter ``u = (t - t_i) / dt`` in ``[0, 1)``.

Both bases are evaluated in cumulative form:

    p(u) = w0 * p0 + w1 * (p1 - p0) + w2 * (p2 - p1) + w3 * (p3 - p2)
    q(u) = exp(w0 * log(q0)) * exp(w1 * l1) * exp(w2 * l2) * exp(w3 * l3)

with ``l_j = log(q_{j-1}^-1 q_j)`` and ``w`` the suffix sums of the basis
weights.  The Z-spline basis interpolates its control points (weights at a
knot are exactly (1, 1, 0, 0)), which is what lets a measurement taken at a
keyframe timestamp depend on that single keyframe pose.  The B-spline basis
only approximates its control points and is kept as the comparison baseline.
"""

from __future__ import annotations

import numpy as np

from .geom import (
    Pose,
    boxplus,
    exp_map,
    gamma_jacobian,
    gamma_jacobian_inv,
    log_map,
    quat_inv,
    quat_mul,
    quat_to_rot,
)


def z_basis(s):
    """Z-spline kernel; accepts scalars or arrays.

    Piecewise cubic with support [-2, 2]: 1 - (5/2)s^2 + (3/2)|s|^3 on
    |s| <= 1 and (1/2)(2 - |s|)^2 (1 - |s|) on 1 < |s| <= 2.
    """
    s = np.abs(np.asarray(s, dtype=float))
    inner = 1.0 - 2.5 * s * s + 1.5 * s * s * s
    outer = 0.5 * (2.0 - s) ** 2 * (1.0 - s)
    out = np.where(s <= 1.0, inner, np.where(s <= 2.0, outer, 0.0))
    return out if out.ndim else float(out)


def z_weights(u: float) -> np.ndarray:
    """Basis weights for the four control points (i-1, i, i+1, i+2)."""
    return z_basis(np.array([u + 1.0, u, u - 1.0, u - 2.0]))


def bspline_basis(s):
    """Cardinal cubic B-spline via the De Boor-Cox recursion, support [-2, 2]."""
    s = np.asarray(s, dtype=float)
    scalar = s.ndim == 0
    x = np.atleast_1d(s) + 2.0  # shift onto the knot vector 0..4
    knots = np.arange(5.0)
    # Degree-0 indicators on [j, j+1); the half-open convention leaves the
    # right endpoint x == 4 at zero, which is correct for the open support.
    N = [
        np.where((x >= knots[j]) & (x < knots[j + 1]), 1.0, 0.0)
        for j in range(4)
    ]
    for k in range(1, 4):
        N = [
            (x - knots[j]) / k * N[j] + (knots[j + k + 1] - x) / k * N[j + 1]
            for j in range(4 - k)
        ]
    return float(N[0][0]) if scalar else N[0]


def bspline_weights(u: float) -> np.ndarray:
    return bspline_basis(np.array([u + 1.0, u, u - 1.0, u - 2.0]))


def cumulative_weights(weights: np.ndarray) -> np.ndarray:
    """Suffix sums of basis weights; leading entry is the partition sum."""
    return np.cumsum(weights[::-1])[::-1].copy()


def z_cumulative_weights(u: float) -> np.ndarray:
    return cumulative_weights(z_weights(u))


def bspline_cumulative_weights(u: float) -> np.ndarray:
    return cumulative_weights(bspline_weights(u))


def _basis_weights(u: float, basis: str) -> np.ndarray:
    if basis == "z":
        return z_weights(u)
    if basis == "bspline":
        return bspline_weights(u)
    raise ValueError(f"unknown basis {basis!r}")


def _relative_logs(poses: list[Pose]) -> list[np.ndarray]:
    logs = [log_map(poses[0].q)]
    for a, b in zip(poses[:-1], poses[1:]):
        logs.append(log_map(quat_mul(quat_inv(a.q), b.q)))
    return logs


def interpolate_pose(poses: list[Pose], u: float, basis: str = "z") -> Pose:
    """Blend four control poses at segment-local u in [0, 1]."""
    w = cumulative_weights(_basis_weights(u, basis))
    logs = _relative_logs(poses)
    q = exp_map(w[0] * logs[0])
    for j in range(1, 4):
        q = quat_mul(q, exp_map(w[j] * logs[j]))
    p = w[0] * poses[0].p
    for j in range(1, 4):
        p = p + w[j] * (poses[j].p - poses[j - 1].p)
    return Pose(q, p)


def interpolation_jacobians(
    poses: list[Pose], u: float, basis: str = "z"
) -> tuple[Pose, np.ndarray, np.ndarray]:
    """Interpolated pose plus its derivatives w.r.t. the control poses.

    Returns (pose, trans_weights, rot_jacs) where trans_weights[c] scales the
    identity for d p(u) / d p_c, and rot_jacs[c] is the 3x3 map from a right
    tangent perturbation of control rotation c to the right tangent of q(u).
    """
    wb = _basis_weights(u, basis)
    w = cumulative_weights(wb)
    logs = _relative_logs(poses)

    factors = [exp_map(w[j] * logs[j]) for j in range(4)]
    q = factors[0]
    for j in range(1, 4):
        q = quat_mul(q, factors[j])

    # Suffix rotation matrices B_j = R(factor_{j+1} * ... * factor_3).
    suffix = [np.eye(3)] * 4
    acc = np.array([1.0, 0.0, 0.0, 0.0])
    for j in range(3, 0, -1):
        acc = quat_mul(factors[j], acc)
        suffix[j - 1] = quat_to_rot(acc)

    # For each log term: right-perturbing its leading argument contributes
    # -Gamma(-l)^-1 through the log, its trailing argument +Gamma(l)^-1.
    # The cumulative scaling then passes through w_j * Gamma(w_j * l_j), and
    # the suffix rotation carries the factor tangent to the product tangent.
    carry = []
    for j in range(4):
        Gj = w[j] * gamma_jacobian(w[j] * logs[j])
        carry.append(suffix[j].T @ Gj)

    rot_jacs = np.zeros((4, 3, 3))
    for c in range(4):
        own = carry[c] @ gamma_jacobian_inv(logs[c])
        rot_jacs[c] += own
        if c + 1 < 4:
            rot_jacs[c] -= carry[c + 1] @ gamma_jacobian_inv(-logs[c + 1])

    p = w[0] * poses[0].p
    for j in range(1, 4):
        p = p + w[j] * (poses[j].p - poses[j - 1].p)

    return Pose(q, p), wb.copy(), rot_jacs


def segment_control_indices(i: int, n: int) -> list[int]:
    """Control indices (i-1, i, i+1, i+2) clamped to [0, n-1].

    Clamping replicates the terminal pose at window edges.
    """
    return [min(max(j, 0), n - 1) for j in (i - 1, i, i + 1, i + 2)]


def locate(t: float, t0: float, dt: float, n: int) -> tuple[int, float] | None:
    """Segment index i and local u for time t on a uniform knot grid.

    Returns None when t falls outside the knot span [t0, t0 + (n-1) dt].
    """
    if n < 2:
        return None
    s = (t - t0) / dt
    if s < -1e-9 or s > (n - 1) + 1e-9:
        return None
    i = int(np.floor(s))
    i = min(max(i, 0), n - 2)
    return i, s - i
