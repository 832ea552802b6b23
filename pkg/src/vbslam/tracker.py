"""Robocentric EKF tracking one agent against the shared map.

State (17 error-state dimensions):

* ``q_WM``  world-from-map rotation, 2-DoF (roll/pitch about gravity);
  yaw of the map frame is unobservable and excluded by parameterization
* ``q_MS``  map-from-sensor rotation (3)
* ``p_MS``  sensor position in the map frame (3)
* ``v_S``   velocity expressed in the sensor frame (3)
* ``b_a``, ``b_w``  accelerometer and gyro biases (3 + 3)

Prediction follows the discrete Euler model driven by raw IMU samples;
updates are joint EKF corrections from map-point reprojections with
per-match Mahalanobis gating and measurement covariance inflated by the
map-point position uncertainty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel, reprojection_chain_many
from .config import TrackerConfig
from .geom import (
    GRAVITY,
    Pose,
    boxplus,
    exp_map,
    gamma_jacobian,
    quat_to_rot,
    roll_pitch_jacobian,
    skew,
)

GRAV = slice(0, 2)
ROT = slice(2, 5)
POS = slice(5, 8)
VEL = slice(8, 11)
BA = slice(11, 14)
BW = slice(14, 17)
DIM = 17

# Noise vector layout for the prediction step (17 entries).
WN_G = slice(0, 2)
WN_V = slice(2, 5)
WN_A = slice(5, 8)
WN_W = slice(8, 11)
WN_BA = slice(11, 14)
WN_BW = slice(14, 17)

G_W = np.array([0.0, 0.0, -GRAVITY])


class TrackingLost(Exception):
    """Fewer inliers than the minimum; the caller must re-initialize."""


@dataclass
class TrackerState:
    q_wm: np.ndarray
    q_ms: np.ndarray
    p_ms: np.ndarray
    v_s: np.ndarray
    b_a: np.ndarray
    b_w: np.ndarray
    cov: np.ndarray
    t: float = 0.0

    def copy(self) -> "TrackerState":
        return TrackerState(
            self.q_wm.copy(), self.q_ms.copy(), self.p_ms.copy(), self.v_s.copy(),
            self.b_a.copy(), self.b_w.copy(), self.cov.copy(), self.t,
        )

    def pose(self) -> Pose:
        return Pose(self.q_ms.copy(), self.p_ms.copy())

    def pose_cov(self) -> np.ndarray:
        return self.cov[2:8, 2:8].copy()


def make_state(cfg: TrackerConfig, q_wm, q_ms, p_ms, v_s, b_a, b_w, t=0.0) -> TrackerState:
    cov = np.diag(
        np.concatenate(
            [
                np.full(2, cfg.init_grav_sigma**2),
                np.full(3, cfg.init_rot_sigma**2),
                np.full(3, cfg.init_pos_sigma**2),
                np.full(3, cfg.init_vel_sigma**2),
                np.full(3, cfg.init_ba_sigma**2),
                np.full(3, cfg.init_bw_sigma**2),
            ]
        )
    )
    return TrackerState(
        np.array(q_wm, dtype=float), np.array(q_ms, dtype=float),
        np.array(p_ms, dtype=float), np.array(v_s, dtype=float),
        np.array(b_a, dtype=float), np.array(b_w, dtype=float), cov, t,
    )


def state_boxplus(s: TrackerState, delta: np.ndarray) -> TrackerState:
    out = s.copy()
    out.q_wm = boxplus(s.q_wm, roll_pitch_jacobian(s.q_wm) @ delta[GRAV])
    out.q_ms = boxplus(s.q_ms, delta[ROT])
    out.p_ms = s.p_ms + delta[POS]
    out.v_s = s.v_s + delta[VEL]
    out.b_a = s.b_a + delta[BA]
    out.b_w = s.b_w + delta[BW]
    return out


def state_boxminus(s1: TrackerState, s2: TrackerState) -> np.ndarray:
    from .geom import boxminus as quat_boxminus

    delta = np.empty(DIM)
    phi = quat_boxminus(s1.q_wm, s2.q_wm)
    delta[GRAV] = np.linalg.lstsq(roll_pitch_jacobian(s2.q_wm), phi, rcond=None)[0]
    delta[ROT] = quat_boxminus(s1.q_ms, s2.q_ms)
    delta[POS] = s1.p_ms - s2.p_ms
    delta[VEL] = s1.v_s - s2.v_s
    delta[BA] = s1.b_a - s2.b_a
    delta[BW] = s1.b_w - s2.b_w
    return delta


def predict_mean(
    s: TrackerState, accel: np.ndarray, gyro: np.ndarray, dt: float,
    noise: np.ndarray | None = None,
) -> TrackerState:
    """One discrete Euler prediction step; ``noise`` exposes the injection
    map whose Jacobian is G (zeros in normal operation)."""
    n = np.zeros(DIM) if noise is None else noise
    omega = gyro - s.b_w - n[WN_W]
    a_s = accel - s.b_a - n[WN_A]
    R_ms = quat_to_rot(s.q_ms)
    R_wm = quat_to_rot(s.q_wm)

    out = s.copy()
    out.q_wm = boxplus(s.q_wm, roll_pitch_jacobian(s.q_wm) @ (dt * n[WN_G]))
    out.q_ms = boxplus(s.q_ms, dt * omega)
    out.p_ms = s.p_ms + dt * (R_ms @ (s.v_s + n[WN_V]))
    out.v_s = s.v_s + dt * (R_ms.T @ (R_wm.T @ G_W) + a_s - np.cross(omega, s.v_s))
    out.b_a = s.b_a + dt * n[WN_BA]
    out.b_w = s.b_w + dt * n[WN_BW]
    out.t = s.t + dt
    return out


def prediction_jacobians(
    s: TrackerState, accel: np.ndarray, gyro: np.ndarray, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """Error-state transition F and noise Jacobian G for one step."""
    omega = gyro - s.b_w
    R_ms = quat_to_rot(s.q_ms)
    R_wm = quat_to_rot(s.q_wm)
    g_m = R_wm.T @ G_W
    Gam = gamma_jacobian(dt * omega)
    Jrp = roll_pitch_jacobian(s.q_wm)

    F = np.eye(DIM)
    F[ROT, ROT] = quat_to_rot(exp_map(dt * omega)).T
    F[ROT, BW] = -dt * Gam
    F[POS, ROT] = -dt * R_ms @ skew(s.v_s)
    F[POS, VEL] = dt * R_ms
    F[VEL, GRAV] = dt * R_ms.T @ skew(g_m) @ Jrp
    F[VEL, ROT] = dt * skew(R_ms.T @ g_m)
    F[VEL, VEL] = np.eye(3) - dt * skew(omega)
    F[VEL, BA] = -dt * np.eye(3)
    F[VEL, BW] = -dt * skew(s.v_s)

    G = np.zeros((DIM, DIM))
    G[GRAV, WN_G] = dt * np.eye(2)
    G[POS, WN_V] = dt * R_ms
    G[VEL, WN_A] = -dt * np.eye(3)
    G[ROT, WN_W] = -dt * Gam
    G[VEL, WN_W] = -dt * skew(s.v_s)
    G[BA, WN_BA] = dt * np.eye(3)
    G[BW, WN_BW] = dt * np.eye(3)
    return F, G


def process_noise(cfg: TrackerConfig, imu_cfg, dt: float) -> np.ndarray:
    w = np.empty(DIM)
    w[WN_G] = cfg.sigma_grav**2
    w[WN_V] = cfg.sigma_vel**2
    w[WN_A] = imu_cfg.accel_noise**2
    w[WN_W] = imu_cfg.gyro_noise**2
    w[WN_BA] = imu_cfg.accel_bias_rw**2
    w[WN_BW] = imu_cfg.gyro_bias_rw**2
    return np.diag(w / dt)


def propagate(
    s: TrackerState, accel: np.ndarray, gyro: np.ndarray, dt: float, W: np.ndarray
) -> TrackerState:
    F, G = prediction_jacobians(s, accel, gyro, dt)
    out = predict_mean(s, accel, gyro, dt)
    cov = F @ s.cov @ F.T + G @ W @ G.T
    out.cov = 0.5 * (cov + cov.T)
    return out


@dataclass
class MapSnapshot:
    """Immutable view of the map used by the tracker."""

    ids: np.ndarray  # (N,) int64
    positions: np.ndarray  # (N, 3)
    covs: np.ndarray  # (N, 3, 3)
    descs: np.ndarray  # (N, 48) uint8

    def __len__(self) -> int:
        return self.ids.shape[0]


@dataclass
class FrameResult:
    t: float
    pose: Pose
    cov6: np.ndarray
    n_candidates: int
    n_inliers: int
    mp_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    kp_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def hamming_many(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between (N, B) and (K, B) uint8 arrays."""
    return np.bitwise_count(a[:, None, :] ^ b[None, :, :]).sum(axis=2)


def match_projections(
    uv_proj: np.ndarray,
    valid: np.ndarray,
    descs: np.ndarray,
    frame_uv: np.ndarray,
    frame_desc: np.ndarray,
    radius: float,
    hamming_threshold: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Greedy unique matching of projected points to keypoints.

    Candidate pairs must fall within the pixel radius and below the Hamming
    threshold; pairs are consumed best-distance-first so each projection and
    each keypoint is used at most once.
    """
    cand = np.flatnonzero(valid)
    if cand.size == 0 or frame_uv.shape[0] == 0:
        e = np.empty(0, dtype=np.int64)
        return e, e.copy(), np.empty(0)
    duv = uv_proj[cand][:, None, :] - frame_uv[None, :, :]
    close = np.einsum("nkj,nkj->nk", duv, duv) <= radius * radius
    if not close.any():
        e = np.empty(0, dtype=np.int64)
        return e, e.copy(), np.empty(0)
    dist = hamming_many(descs[cand], frame_desc)
    ok = close & (dist <= hamming_threshold)
    ii, jj = np.nonzero(ok)
    order = np.argsort(dist[ii, jj], kind="stable")
    used_i = np.zeros(cand.size, dtype=bool)
    used_j = np.zeros(frame_uv.shape[0], dtype=bool)
    out_i, out_j, out_d = [], [], []
    for k in order:
        i, j = ii[k], jj[k]
        if used_i[i] or used_j[j]:
            continue
        used_i[i] = used_j[j] = True
        out_i.append(cand[i])
        out_j.append(j)
        out_d.append(dist[i, j])
    return (
        np.asarray(out_i, dtype=np.int64),
        np.asarray(out_j, dtype=np.int64),
        np.asarray(out_d, dtype=float),
    )


def update(
    s: TrackerState,
    snapshot: MapSnapshot,
    frame,
    cam: CameraModel,
    cfg: TrackerConfig,
    sigma_px: float,
) -> tuple[TrackerState, FrameResult]:
    """Joint EKF update from all gated map-point matches.

    Raises TrackingLost when fewer than ``cfg.min_inliers`` matches survive
    the chi-square gate.
    """
    uv_proj, J_pose, J_point, valid = reprojection_chain_many(
        s.pose(), snapshot.positions, cam
    )
    mp_idx, kp_idx, ham = match_projections(
        uv_proj, valid, snapshot.descs, frame.uv, frame.desc,
        cfg.match_radius, cfg.hamming_threshold,
    )
    if mp_idx.size > cfg.max_matches:
        keep = np.argsort(ham, kind="stable")[: cfg.max_matches]
        keep.sort()
        mp_idx, kp_idx = mp_idx[keep], kp_idx[keep]
    n_cand = mp_idx.size

    if n_cand == 0:
        raise TrackingLost("no association candidates")

    y = frame.uv[kp_idx] - uv_proj[mp_idx]
    H = np.zeros((n_cand, 2, DIM))
    H[:, :, ROT] = -J_pose[mp_idx, :, :3]
    H[:, :, POS] = -J_pose[mp_idx, :, 3:]
    sig = sigma_px * 2.0 ** frame.octave[kp_idx].astype(float)
    R = np.einsum("nij,njk,nlk->nil", J_point[mp_idx], snapshot.covs[mp_idx],
                  J_point[mp_idx])
    R[:, 0, 0] += sig**2
    R[:, 1, 1] += sig**2

    # Per-match gating against the predicted covariance.
    S = np.einsum("nij,jk,nlk->nil", H, s.cov, H) + R
    Sinv = np.linalg.inv(S)
    m2 = np.einsum("ni,nij,nj->n", y, Sinv, y)
    inlier = m2 < cfg.gate
    n_in = int(inlier.sum())
    if n_in < cfg.min_inliers:
        raise TrackingLost(f"{n_in} inliers after gating")

    Hs = H[inlier].reshape(-1, DIM)
    ys = y[inlier].reshape(-1)
    Rs = np.zeros((2 * n_in, 2 * n_in))
    Rblk = R[inlier]
    for k in range(n_in):
        Rs[2 * k : 2 * k + 2, 2 * k : 2 * k + 2] = Rblk[k]

    PHt = s.cov @ Hs.T
    Sj = Hs @ PHt + Rs
    K = np.linalg.solve(Sj.T, PHt.T).T
    delta = -K @ ys
    out = state_boxplus(s, delta)
    A = np.eye(DIM) - K @ Hs
    cov = A @ s.cov @ A.T + K @ Rs @ K.T
    out.cov = 0.5 * (cov + cov.T)
    out.t = frame.t

    result = FrameResult(
        t=frame.t,
        pose=out.pose(),
        cov6=out.pose_cov(),
        n_candidates=n_cand,
        n_inliers=n_in,
        mp_ids=snapshot.ids[mp_idx[inlier]],
        kp_idx=kp_idx[inlier],
    )
    return out, result


def should_create_keyframe(t: float, t_last: float, interval: float) -> bool:
    return t - t_last >= interval - 1e-9
