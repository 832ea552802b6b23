"""Shared-map bootstrap for the agent pair.

One agent (A by convention) collects synchronized frames from both
agents, recovers the scale-free two-view geometry, fixes the scale with
the radio range, grows a small vision-only map, and finally solves the
joint inertial alignment: per-agent gyro biases, per-keyframe
velocities, and a single shared gravity direction.  The result ships to
the partner as an init bundle whose byte-level digest both sides can
compare.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend, comms
from .camera import CameraModel, reprojection_chain_many
from .config import BackendConfig, InitConfig, MapperConfig
from .geom import (Pose, boxminus, exp_map, log_map, quat_inv, quat_mul,
                   quat_to_rot, rot_to_quat)
from .mapper import (DegenerateGeometry, Keyframe, MapPoint, SlamMap,
                     hamming_many, triangulate_pair)
from .tracker import match_projections

GRAVITY = 9.81


class InsufficientMatches(Exception):
    """Too few correspondences (or RANSAC inliers) for two-view geometry."""


class AlignmentFailed(Exception):
    """3D-2D alignment rejected a frame; the init map must be rebuilt."""


class ExcitationTooLow(Exception):
    """Inertial alignment is ill-conditioned on this trajectory segment."""


# --------------------------------------------------------------------------
# Two-view geometry
# --------------------------------------------------------------------------


def _mutual_match(desc_a, desc_b, thresh: int):
    d = hamming_many(desc_a, desc_b)
    best_b = np.argmin(d, axis=1)
    best_a = np.argmin(d, axis=0)
    rows = np.arange(desc_a.shape[0])
    mutual = best_a[best_b[rows]] == rows
    good = mutual & (d[rows, best_b[rows]] <= thresh)
    return rows[good], best_b[rows[good]]


def eight_point_essential(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Essential matrix from normalized-plane correspondences.

    Solves x_b^T E x_a = 0 in least squares with Hartley conditioning,
    then projects onto the essential manifold (singular values 1, 1, 0).
    """

    def _condition(x):
        mean = x.mean(axis=0)
        scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(x - mean, axis=1)), 1e-12)
        T = np.array([[scale, 0.0, -scale * mean[0]],
                      [0.0, scale, -scale * mean[1]],
                      [0.0, 0.0, 1.0]])
        return (x - mean) * scale, T

    na, Ta = _condition(xa)
    nb, Tb = _condition(xb)
    h_a = np.column_stack([na, np.ones(len(na))])
    h_b = np.column_stack([nb, np.ones(len(nb))])
    A = np.einsum("ni,nj->nij", h_b, h_a).reshape(len(na), 9)
    _, _, Vt = np.linalg.svd(A)
    E = Vt[-1].reshape(3, 3)
    E = Tb.T @ E @ Ta
    U, _, Vt = np.linalg.svd(E)
    E = U @ np.diag([1.0, 1.0, 0.0]) @ Vt
    return E / np.linalg.norm(E)


def _sampson_px(E, xa, xb, f_px: float) -> np.ndarray:
    """First-order epipolar distance in (approximate) pixel units."""
    h_a = np.column_stack([xa, np.ones(len(xa))])
    h_b = np.column_stack([xb, np.ones(len(xb))])
    Ex1 = h_a @ E.T
    Etx2 = h_b @ E
    num = np.einsum("ni,ni->n", h_b, Ex1)
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    return f_px * np.abs(num) / np.sqrt(np.maximum(den, 1e-18))


def ransac_essential(xa, xb, f_px, cfg: InitConfig, rng, scales=None):
    """RANSAC over the normalized 8-point solver.

    ``scales`` holds per-correspondence sigma multipliers (from feature
    octaves); the Sampson gate widens accordingly.  Returns (E, inlier
    mask).  Raises InsufficientMatches when the best consensus set stays
    below the configured minimum.
    """
    n = xa.shape[0]
    if n < 8:
        raise InsufficientMatches(f"{n} correspondences")
    scales = np.ones(n) if scales is None else np.asarray(scales, float)

    def _inliers(E):
        return _sampson_px(E, xa, xb, f_px) / scales < cfg.sampson_thresh

    best_mask = None
    best_count = 0
    for _ in range(cfg.ransac_iters):
        sel = rng.choice(n, size=8, replace=False)
        try:
            E = eight_point_essential(xa[sel], xb[sel])
        except np.linalg.LinAlgError:
            continue
        mask = _inliers(E)
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < max(cfg.min_inliers, 8):
        raise InsufficientMatches(f"best consensus {best_count}")
    # Iterative refit on the consensus set; candidates compete on inlier
    # count so a bad refit (e.g. near-planar structure) cannot win.
    best_E = eight_point_essential(xa[best_mask], xb[best_mask])
    candidates = [best_E]
    E = best_E
    for _ in range(3):
        err = _sampson_px(E, xa, xb, f_px) / scales
        refit = err < 0.5 * cfg.sampson_thresh
        if int(refit.sum()) < 8:
            refit = err < cfg.sampson_thresh
        if int(refit.sum()) < 8:
            break
        E = eight_point_essential(xa[refit], xb[refit])
        candidates.append(E)
    best_E, best_mask = None, None
    for E in candidates:
        mask = _inliers(E)
        if best_mask is None or int(mask.sum()) > int(best_mask.sum()):
            best_E, best_mask = E, mask
    if int(best_mask.sum()) < max(cfg.min_inliers, 8):
        raise InsufficientMatches(f"refined consensus {int(best_mask.sum())}")
    return best_E, best_mask


def _triangulate_linear(R, t, xa, xb):
    """Midpoint-free DLT depths for cheirality voting; P_a = [I 0]."""
    n = xa.shape[0]
    out = np.empty((n, 3))
    P_b = np.hstack([R, t[:, None]])
    for k in range(n):
        A = np.array([
            [-1.0, 0.0, xa[k, 0], 0.0],
            [0.0, -1.0, xa[k, 1], 0.0],
        ])
        A = np.vstack([
            A,
            xb[k, 0] * P_b[2] - P_b[0],
            xb[k, 1] * P_b[2] - P_b[1],
        ])
        _, _, Vt = np.linalg.svd(A)
        h = Vt[-1]
        out[k] = h[:3] / h[3] if abs(h[3]) > 1e-12 else np.full(3, np.inf)
    return out


def decompose_essential(E, xa, xb):
    """Cheirality-consistent (R, t) with ``X_b = R X_a + t`` and unit t."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    best = None
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for tc in (t, -t):
            pts = _triangulate_linear(R, tc, xa, xb)
            z_a = pts[:, 2]
            z_b = (pts @ R.T + tc)[:, 2]
            votes = int(np.sum((z_a > 0) & (z_b > 0) & np.isfinite(z_a)))
            if best is None or votes > best[0]:
                best = (votes, R, tc)
    _, R, tc = best
    return R, tc


def _median_parallax(xa, xb) -> float:
    """Median residual angle after the best pure-rotation fit.

    Near-zero means the correspondences are explainable by rotation
    alone, i.e. the pair carries no usable baseline.
    """
    ra = np.column_stack([xa, np.ones(len(xa))])
    rb = np.column_stack([xb, np.ones(len(xb))])
    ra /= np.linalg.norm(ra, axis=1, keepdims=True)
    rb /= np.linalg.norm(rb, axis=1, keepdims=True)
    W = rb.T @ ra
    U, _, Vt = np.linalg.svd(W)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R_fit = U @ S @ Vt
    cosang = np.clip(np.einsum("ni,ni->n", ra @ R_fit.T, rb), -1.0, 1.0)
    return float(np.median(np.arccos(cosang)))


def relative_sensor_pose(R, t, scale: float, cam: CameraModel) -> Pose:
    """Sensor-frame pose of the second view given camera-frame (R, t)."""
    T_cam = Pose(rot_to_quat(R), scale * t)
    T_cs_inv = cam.T_CS.inverse()
    return T_cs_inv @ T_cam.inverse() @ cam.T_CS


def scale_from_range(R, t, cam: CameraModel, range_m: float) -> float:
    """Baseline scale making the sensor-origin distance equal the range."""
    p0 = relative_sensor_pose(R, t, 0.0, cam).p
    p1 = relative_sensor_pose(R, t, 1.0, cam).p
    d = p1 - p0
    # Solve |p0 + s d| = range_m for the positive root.
    a = d @ d
    b = 2.0 * p0 @ d
    c = p0 @ p0 - range_m**2
    disc = b * b - 4.0 * a * c
    if a < 1e-12 or disc < 0.0:
        raise DegenerateGeometry("range not reachable along baseline")
    s = (-b + np.sqrt(disc)) / (2.0 * a)
    if s <= 0.0:
        raise DegenerateGeometry("negative baseline scale")
    return float(s)


def bootstrap_pair(
    frame_a,
    frame_b,
    range_m: float,
    cam: CameraModel,
    cfg: InitConfig,
    mapper_cfg: MapperConfig,
    rng,
    sigma_px: float,
    kf_id_a: int = 0,
    kf_id_b: int = 1 << 56,
) -> SlamMap:
    """Two-view initialization of the shared map.

    The map frame is the first agent's sensor frame; the partner pose
    comes from the essential matrix with the baseline scaled so the
    sensor-origin distance equals ``range_m``.  Inlier matches are
    triangulated into map points.
    """
    ia, ib = _mutual_match(frame_a.desc, frame_b.desc, mapper_cfg.hamming_threshold)
    if ia.size < cfg.min_matches:
        raise InsufficientMatches(f"{ia.size} descriptor matches")
    xa = np.array([cam.unproject(uv) for uv in frame_a.uv[ia]])
    xb = np.array([cam.unproject(uv) for uv in frame_b.uv[ib]])
    f_px = 0.5 * (cam.fx + cam.fy)
    scales = np.sqrt(0.5 * (4.0 ** frame_a.octave[ia].astype(float)
                            + 4.0 ** frame_b.octave[ib].astype(float)))

    E, inliers = ransac_essential(xa, xb, f_px, cfg, rng, scales)
    ia, ib = ia[inliers], ib[inliers]
    if _median_parallax(xa[inliers], xb[inliers]) < cfg.min_parallax:
        raise DegenerateGeometry("near-pure rotation between views")
    R, t = decompose_essential(E, xa[inliers], xb[inliers])

    s = scale_from_range(R, t, cam, range_m)
    pose_b = relative_sensor_pose(R, t, s, cam)

    cov6 = np.diag([cfg.kf_rot_sigma**2] * 3 + [cfg.kf_pos_sigma**2] * 3)
    smap = SlamMap(agent=0)
    kf_a = Keyframe(kf_id_a, 0, frame_a.t, frame_a.uv, frame_a.octave,
                    frame_a.desc, Pose.identity(), cov6.copy(), native=True,
                    truth_id=getattr(frame_a, "truth_id", None))
    kf_b = Keyframe(kf_id_b, 1, frame_b.t, frame_b.uv, frame_b.octave,
                    frame_b.desc, pose_b, cov6.copy(), native=False,
                    truth_id=getattr(frame_b, "truth_id", None))
    smap.add_keyframe(kf_a)
    smap.add_keyframe(kf_b)

    tris = triangulate_pair(kf_a, kf_b, ia, ib, cam, mapper_cfg, sigma_px)
    for a_idx, b_idx, pos, cov in tris:
        mp = MapPoint(mp_id=smap.new_mp_id(), position=pos, cov=cov,
                      desc=kf_a.desc[a_idx].copy(),
                      obs={kf_a.kf_id: a_idx, kf_b.kf_id: b_idx})
        smap.mps[mp.mp_id] = mp
        kf_a.bound[a_idx] = mp.mp_id
        kf_b.bound[b_idx] = mp.mp_id
    if len(smap.mps) < cfg.min_inliers:
        raise InsufficientMatches(f"only {len(smap.mps)} triangulated points")
    return smap


# --------------------------------------------------------------------------
# Incremental vision-only growth
# --------------------------------------------------------------------------


def align_frame(
    smap: SlamMap,
    frame,
    seed_pose: Pose,
    cam: CameraModel,
    cfg: InitConfig,
    mapper_cfg: MapperConfig,
    sigma_px: float,
) -> tuple[Pose, np.ndarray, np.ndarray]:
    """3D-2D alignment of a frame against the init map.

    Zero-velocity motion model: the previous pose of the same agent
    seeds a Gauss-Newton reprojection minimization.  Returns the refined
    pose plus the surviving (map-point index, keypoint index) matches.
    """
    snap = smap.snapshot()
    if len(snap) == 0:
        raise AlignmentFailed("init map is empty")
    uv_proj, _, _, valid = reprojection_chain_many(seed_pose, snap.positions, cam)
    mp_idx, kp_idx, _ = match_projections(
        uv_proj, valid, snap.descs, frame.uv, frame.desc,
        cfg.match_radius, mapper_cfg.hamming_threshold)
    if mp_idx.size < cfg.align_min_inliers:
        raise AlignmentFailed(f"{mp_idx.size} initial matches")

    pose = seed_pose.copy()
    pts = snap.positions[mp_idx]
    meas = frame.uv[kp_idx]
    sig = sigma_px * 2.0 ** frame.octave[kp_idx].astype(float)
    for _ in range(10):
        uv, J_pose, _, valid = reprojection_chain_many(pose, pts, cam)
        r = (meas - uv) / sig[:, None]
        Jw = J_pose / sig[:, None, None]
        s_sq = np.einsum("ni,ni->n", r, r)
        w = np.where(valid, 1.0 / (1.0 + s_sq / 9.0), 0.0)
        H = np.einsum("n,nik,nil->kl", w, Jw, Jw)
        b = np.einsum("n,nik,ni->k", w, Jw, r)
        try:
            dx = np.linalg.solve(H + 1e-8 * np.eye(6), b)
        except np.linalg.LinAlgError:
            raise AlignmentFailed("singular alignment system")
        pose = pose.retract(dx)
        if np.linalg.norm(dx) < 1e-10:
            break

    uv, _, _, valid = reprojection_chain_many(pose, pts, cam)
    err = np.linalg.norm(meas - uv, axis=1)
    keep = valid & (err < 3.0 * sig)
    if int(keep.sum()) < cfg.align_min_inliers:
        raise AlignmentFailed(f"{int(keep.sum())} inliers after refinement")
    return pose, mp_idx[keep], kp_idx[keep]


def _ba_config(cfg: InitConfig) -> BackendConfig:
    ba = BackendConfig()
    ba.consensus = False
    ba.max_lm_iters = cfg.ba_iters
    return ba


def run_init_ba(smap: SlamMap, cam: CameraModel, cfg: InitConfig,
                sigma_px: float, fixed_ids, scale_anchor=None) -> dict:
    """Vision-only bundle adjustment over every init keyframe.

    Fixing the first pose removes six gauge freedoms; the seventh (the
    global scale a pure-vision problem cannot see) is removed afterwards
    by rescaling the map about the fixed origin until the bootstrap pair
    sits at the radio-measured distance.  scale_anchor = (kf_id of the
    fixed origin keyframe, kf_id of the partner keyframe, range).
    """
    window = backend.build_window(smap, sigma_px, horizon=np.inf,
                                  fixed_ids=tuple(fixed_ids))
    problem = backend.build_problem(window, None, _ba_config(cfg), cam)
    info = backend.solve_local(problem, max_iters=cfg.ba_iters)
    backend.apply_window(smap, window)
    if scale_anchor is not None:
        id_a, id_b, range_m = scale_anchor
        origin = smap.kfs[id_a].pose.p
        baseline = np.linalg.norm(smap.kfs[id_b].pose.p - origin)
        if baseline < 1e-9:
            raise AlignmentFailed("bootstrap baseline collapsed")
        s = range_m / baseline
        for kf in smap.kfs.values():
            kf.pose.p = origin + s * (kf.pose.p - origin)
        for mp in smap.mps.values():
            mp.position = origin + s * (mp.position - origin)
            mp.cov = mp.cov * s * s
    return info


def extend_init_map(
    smap: SlamMap,
    frame,
    agent: int,
    kf_id: int,
    cam: CameraModel,
    cfg: InitConfig,
    mapper_cfg: MapperConfig,
    sigma_px: float,
    fixed_ids,
    scale_anchor=None,
) -> Keyframe:
    """Grow the init map by one frame: align, bind, triangulate, refine.

    New points are triangulated both against the same agent's previous
    keyframe (temporal parallax) and the partner agent's latest keyframe
    (the wide inter-agent baseline).  Raises AlignmentFailed when the
    frame cannot be placed; the caller resets the whole init map.
    """
    prev = [k for k in smap.keyframes_by_time(agent)]
    if not prev:
        raise AlignmentFailed("no previous keyframe for this agent")
    seed = prev[-1].pose
    pose, mp_idx, kp_idx = align_frame(smap, frame, seed, cam, cfg, mapper_cfg,
                                       sigma_px)

    cov6 = np.diag([cfg.kf_rot_sigma**2] * 3 + [cfg.kf_pos_sigma**2] * 3)
    kf = Keyframe(kf_id, agent, frame.t, frame.uv, frame.octave, frame.desc,
                  pose, cov6, native=(agent == smap.agent),
                  truth_id=getattr(frame, "truth_id", None))
    smap.add_keyframe(kf)
    snap = smap.snapshot()
    for mi, ki in zip(mp_idx, kp_idx):
        mp = smap.mps[int(snap.ids[mi])]
        if kf.kf_id not in mp.obs and kf.bound[ki] < 0:
            mp.obs[kf.kf_id] = int(ki)
            kf.bound[ki] = mp.mp_id

    candidates = [prev[-1]]
    partner = [k for k in smap.keyframes_by_time(1 - agent)]
    if partner:
        candidates.append(partner[-1])
    for cand in candidates:
        ia, ib = _mutual_match(kf.desc, cand.desc, mapper_cfg.hamming_threshold)
        free = (kf.bound[ia] < 0) & (cand.bound[ib] < 0)
        ia, ib = ia[free], ib[free]
        if not ia.size:
            continue
        try:
            tris = triangulate_pair(kf, cand, ia, ib, cam, mapper_cfg, sigma_px)
        except DegenerateGeometry:
            tris = []
        for a_idx, b_idx, pos, cov in tris:
            if kf.bound[a_idx] >= 0 or cand.bound[b_idx] >= 0:
                continue
            mp = MapPoint(mp_id=smap.new_mp_id(), position=pos, cov=cov,
                          desc=kf.desc[a_idx].copy(),
                          obs={kf.kf_id: int(a_idx), cand.kf_id: int(b_idx)})
            smap.mps[mp.mp_id] = mp
            kf.bound[a_idx] = mp.mp_id
            cand.bound[b_idx] = mp.mp_id

    run_init_ba(smap, cam, cfg, sigma_px, fixed_ids, scale_anchor)
    return kf


def median_reprojection_px(smap: SlamMap, cam: CameraModel,
                           sigma_px: float | None = None) -> float:
    """Median reprojection error over every stored observation.

    With sigma_px given, each residual is divided by its observation
    sigma (sigma_px scaled by 2**octave) and the median is in sigma
    units instead of pixels.
    """
    errs = []
    for mp in smap.mps.values():
        for kf_id, ki in mp.obs.items():
            kf = smap.kfs[kf_id]
            uv, _, _, valid = reprojection_chain_many(
                kf.pose, mp.position[None, :], cam)
            if not valid[0]:
                continue
            e = float(np.linalg.norm(kf.uv[ki] - uv[0]))
            if sigma_px is not None:
                e /= sigma_px * float(2.0 ** kf.octave[ki])
            errs.append(e)
    return float(np.median(errs)) if errs else float("inf")


# --------------------------------------------------------------------------
# Inertial alignment
# --------------------------------------------------------------------------


@dataclass
class Preintegrated:
    """Euler-integrated IMU increments between two keyframes.

    alpha/beta are linear in an accelerometer bias perturbation:
    alpha(b_a) = alpha + J_alpha @ b_a (same for beta).  g_dt2 is the
    double-sum coefficient multiplying gravity in the position model,
    matching the same explicit Euler recursion the tracker uses (it
    converges to dt^2 / 2 as the sample rate grows).
    """

    dt: float
    dq: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    J_alpha: np.ndarray
    J_beta: np.ndarray
    g_dt2: float


def preintegrate(t, accel, gyro, t_i, t_j, b_w) -> Preintegrated:
    """Integrate samples with t in [t_i, t_j).

    Explicit Euler in the same update order as the tracker prediction:
    position advances with the pre-update velocity, then the velocity
    advances with the pre-update attitude.
    """
    idx = np.flatnonzero((t >= t_i - 1e-9) & (t < t_j - 1e-9))
    q = np.array([1.0, 0.0, 0.0, 0.0])
    alpha = np.zeros(3)
    beta = np.zeros(3)
    J_alpha = np.zeros((3, 3))
    J_beta = np.zeros((3, 3))
    g_dt2 = 0.0
    elapsed = 0.0
    for n, k in enumerate(idx):
        t_next = t[idx[n + 1]] if n + 1 < idx.size else t_j
        dt = float(t_next - t[k])
        R = quat_to_rot(q)
        alpha += beta * dt
        J_alpha += J_beta * dt
        g_dt2 += elapsed * dt
        beta += R @ accel[k] * dt
        J_beta += -R * dt
        q = quat_mul(q, exp_map((gyro[k] - b_w) * dt))
        elapsed += dt
    return Preintegrated(float(t_j - t_i), q, alpha, beta, J_alpha, J_beta,
                         g_dt2)


def estimate_gyro_bias(kf_rots, t, gyro, kf_times, iters: int = 5) -> np.ndarray:
    """Gyro bias minimizing rotation mismatch across keyframe intervals.

    kf_rots are sensor-to-map quaternions at the keyframe times; the
    Jacobian of each integrated rotation is taken numerically.
    """
    accel = np.zeros((len(t), 3))

    def residuals(b):
        out = []
        for i in range(len(kf_times) - 1):
            pre = preintegrate(t, accel, gyro, kf_times[i], kf_times[i + 1], b)
            dq_vis = quat_mul(quat_inv(kf_rots[i]), kf_rots[i + 1])
            out.append(log_map(quat_mul(quat_inv(pre.dq), dq_vis)))
        return np.concatenate(out)

    b = np.zeros(3)
    eps = 1e-6
    for _ in range(iters):
        r = residuals(b)
        J = np.empty((r.size, 3))
        for k in range(3):
            d = np.zeros(3)
            d[k] = eps
            J[:, k] = (residuals(b + d) - residuals(b - d)) / (2.0 * eps)
        try:
            step = np.linalg.solve(J.T @ J + 1e-12 * np.eye(3), -J.T @ r)
        except np.linalg.LinAlgError:
            break
        b = b + step
        if np.linalg.norm(step) < 1e-12:
            break
    return b


@dataclass
class InitResult:
    q_wm: np.ndarray
    gravity_m: np.ndarray
    b_w: dict
    velocities: dict  # agent -> list of (kf_id, v in map frame)
    cond: float


def imu_init(kf_sets: dict, imu: dict, cfg: InitConfig) -> InitResult:
    """Joint inertial alignment over both agents' init keyframes.

    kf_sets: agent -> list of (kf_id, t, Pose); imu: agent -> (t, accel,
    gyro) arrays.  Velocities (map frame, one per keyframe) and a shared
    two-degree-of-freedom gravity direction are solved in a single
    linear system.  Accelerometer biases are not solved (they are handed
    to the tracker as zero-mean states), but the conditioning gate is
    evaluated on the system augmented with per-agent bias columns: when
    the attitude barely changes, a bias is indistinguishable from a
    gravity shift and the augmented system becomes rank deficient, which
    is exactly the motion that must be rejected.
    """
    agents = sorted(kf_sets)
    b_w = {}
    pre = {}
    for a in agents:
        kfs = kf_sets[a]
        if len(kfs) < cfg.min_keyframes:
            raise ExcitationTooLow(f"agent {a}: {len(kfs)} keyframes")
        t_imu, accel, gyro = imu[a]
        rots = [kf.q for _, _, kf in kfs]
        times = [t for _, t, _ in kfs]
        b_w[a] = estimate_gyro_bias(rots, t_imu, gyro, times)
        pre[a] = [
            preintegrate(t_imu, accel, gyro, times[i], times[i + 1], b_w[a])
            for i in range(len(kfs) - 1)
        ]

    # Initial gravity direction from the first agent's early accelerometer
    # samples rotated into the map frame (specific force points opposite g).
    a0 = agents[0]
    t_imu, accel, _ = imu[a0]
    first_pose = kf_sets[a0][0][2]
    n_seed = min(20, accel.shape[0])
    g_seed = -quat_to_rot(first_pose.q) @ accel[:n_seed].mean(axis=0)
    norm = np.linalg.norm(g_seed)
    g0 = (g_seed / norm * GRAVITY) if norm > 1e-6 else np.array([0.0, 0.0, -GRAVITY])

    def _tangent_basis(g):
        any_v = np.array([1.0, 0.0, 0.0])
        if abs(g[0]) > 0.9 * GRAVITY:
            any_v = np.array([0.0, 1.0, 0.0])
        b1 = np.cross(g, any_v)
        b1 /= np.linalg.norm(b1)
        b2 = np.cross(g, b1)
        b2 /= np.linalg.norm(b2)
        return np.column_stack([b1, b2]) * GRAVITY

    # Solved unknowns: per-keyframe velocities plus the shared gravity
    # correction (2).  The gate matrix appends per-agent bias columns.
    v_index = {}
    n_v = 0
    for a in agents:
        for kf_id, _, _ in kf_sets[a]:
            v_index[(a, kf_id)] = n_v
            n_v += 1
    n_x = 3 * n_v + 2
    ba_off = {a: n_x + 3 * k for k, a in enumerate(agents)}
    n_gate = n_x + 3 * len(agents)

    # Re-linearize the gravity tangent plane a few times: the magnitude
    # constraint makes g live on a sphere, so a single linear solve can
    # only reach the tangent plane of the seed.
    cond = float("inf")
    x = np.zeros(n_x)
    for _ in range(4):
        B = _tangent_basis(g0)
        rows = []
        rhs = []
        for a in agents:
            kfs = kf_sets[a]
            for i in range(len(kfs) - 1):
                kf_i, t_i, pose_i = kfs[i]
                kf_j, t_j, pose_j = kfs[i + 1]
                P = pre[a][i]
                R_i = quat_to_rot(pose_i.q)
                dt = P.dt
                vi = 3 * v_index[(a, kf_i)]
                vj = 3 * v_index[(a, kf_j)]

                row_p = np.zeros((3, n_gate))
                row_p[:, vi:vi + 3] = dt * np.eye(3)
                row_p[:, n_x - 2:n_x] = P.g_dt2 * B
                row_p[:, ba_off[a]:ba_off[a] + 3] = R_i @ P.J_alpha
                rows.append(row_p)
                rhs.append(pose_j.p - pose_i.p - P.g_dt2 * g0 - R_i @ P.alpha)

                row_v = np.zeros((3, n_gate))
                row_v[:, vi:vi + 3] = -np.eye(3)
                row_v[:, vj:vj + 3] = np.eye(3)
                row_v[:, n_x - 2:n_x] = -dt * B
                row_v[:, ba_off[a]:ba_off[a] + 3] = -R_i @ P.J_beta
                rows.append(row_v)
                rhs.append(dt * g0 + R_i @ P.beta)

        A_gate = np.vstack(rows)
        y = np.concatenate(rhs)
        sv = np.linalg.svd(A_gate, compute_uv=False)
        cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
        if cond > cfg.cond_threshold:
            raise ExcitationTooLow(f"condition number {cond:.3e}")
        x, *_ = np.linalg.lstsq(A_gate[:, :n_x], y, rcond=None)
        delta = x[n_x - 2:n_x]
        g_new = g0 + B @ delta
        g_new = g_new / np.linalg.norm(g_new) * GRAVITY
        step = np.linalg.norm(g_new - g0)
        g0 = g_new
        if step < 1e-10:
            break
    g = g0

    velocities = {
        a: [(kf_id, x[3 * v_index[(a, kf_id)]:3 * v_index[(a, kf_id)] + 3].copy())
            for kf_id, _, _ in kf_sets[a]]
        for a in agents
    }

    # Rotation taking the map frame to the gravity-aligned world frame:
    # R(q_wm)^T (0,0,-g) must equal the estimated gravity in map frame.
    w = g / GRAVITY
    u = np.array([0.0, 0.0, -1.0])
    axis = np.cross(w, u)
    s_n = np.linalg.norm(axis)
    c_n = float(w @ u)
    if s_n < 1e-12:
        q_wm = (np.array([1.0, 0.0, 0.0, 0.0]) if c_n > 0
                else exp_map(np.pi * np.array([1.0, 0.0, 0.0])))
    else:
        q_wm = exp_map(axis / s_n * np.arctan2(s_n, c_n))
    return InitResult(q_wm=q_wm, gravity_m=g, b_w=b_w,
                      velocities=velocities, cond=cond)


# --------------------------------------------------------------------------
# Bundle exchange
# --------------------------------------------------------------------------


def build_bundle(smap: SlamMap, result: InitResult, sender: int = 0) -> comms.InitBundleMsg:
    """Deterministically ordered init bundle for broadcast."""
    kf_msgs = []
    for kf_id in sorted(smap.kfs):
        kf = smap.kfs[kf_id]
        kf_msgs.append(comms.KeyframeMsg(
            agent_id=kf.agent, kf_id=kf.kf_id, t_ns=int(round(kf.t * 1e9)),
            q=kf.pose.q.copy(), p=kf.pose.p.copy(), cov6=kf.cov6.copy(),
            uv=kf.uv.astype(np.float32), octave=kf.octave.astype(np.uint8),
            desc=kf.desc.astype(np.uint8)))
    mp_recs = []
    for mp_id in sorted(smap.mps):
        mp = smap.mps[mp_id]
        mp_recs.append(comms.MapPointRecord(
            mp_id=mp.mp_id, position=mp.position.copy(), cov=mp.cov.copy(),
            desc=mp.desc.copy(), obs=sorted(mp.obs.items())))
    imu_states = []
    for a in sorted(result.velocities):
        kf_id, v_m = result.velocities[a][-1]
        pose = smap.kfs[kf_id].pose
        v_s = quat_to_rot(pose.q).T @ v_m
        imu_states.append((a, v_s, result.b_w[a]))
    return comms.InitBundleMsg(sender=sender, q_wm=result.q_wm.copy(),
                               imu_states=imu_states, keyframes=kf_msgs,
                               map_points=mp_recs)


def adopt_bundle(msg: comms.InitBundleMsg, agent: int) -> SlamMap:
    """Reconstruct the shared map on the receiving agent."""
    smap = SlamMap(agent=agent)
    for kf in msg.keyframes:
        pose = Pose(kf.q.copy(), kf.p.copy())
        smap.add_keyframe(Keyframe(
            kf.kf_id, kf.agent_id, kf.t_ns * 1e-9, kf.uv.copy(),
            kf.octave.copy(), kf.desc.copy(), pose, kf.cov6.copy(),
            native=(kf.agent_id == agent)))
    for rec in msg.map_points:
        mp = MapPoint(mp_id=rec.mp_id, position=rec.position.copy(),
                      cov=rec.cov.copy(), desc=rec.desc.copy(),
                      obs=dict(rec.obs), optimized_once=True)
        smap.mps[mp.mp_id] = mp
        for kf_id, ki in rec.obs:
            if kf_id in smap.kfs:
                smap.kfs[kf_id].bound[ki] = mp.mp_id
    return smap


# --------------------------------------------------------------------------
# Session orchestration
# --------------------------------------------------------------------------


@dataclass
class InitSession:
    """Drives initialization on the computing agent.

    Feed synchronized frame pairs, radio ranges, and both IMU streams;
    when enough keyframes have accumulated, finalize() runs the inertial
    alignment and emits the broadcast bundle.
    """

    cam: CameraModel
    cfg: InitConfig
    mapper_cfg: MapperConfig
    sigma_px: float
    seed: int = 0
    smap: SlamMap | None = None
    kf_count: dict = field(default_factory=lambda: {0: 0, 1: 0})
    resets: int = 0

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self.ranges: list[tuple[float, float]] = []
        self.imu: dict[int, list] = {0: [], 1: []}
        self._fixed: tuple = ()
        self._anchor: tuple | None = None
        self._kf_meta: dict[int, list] = {0: [], 1: []}

    def add_range(self, t: float, d: float) -> None:
        self.ranges.append((t, d))

    def add_imu(self, agent: int, t: float, accel, gyro) -> None:
        self.imu[agent].append((t, np.asarray(accel, float), np.asarray(gyro, float)))

    def _closest_range(self, t: float) -> float | None:
        if not self.ranges:
            return None
        return min(self.ranges, key=lambda rd: abs(rd[0] - t))[1]

    def reset(self) -> None:
        self.smap = None
        self.kf_count = {0: 0, 1: 0}
        self._kf_meta = {0: [], 1: []}
        self._fixed = ()
        self._anchor = None
        self.resets += 1

    def _next_id(self, agent: int) -> int:
        n = self.kf_count[agent]
        self.kf_count[agent] = n + 1
        return (agent << 56) | n

    def add_frames(self, frame_a, frame_b) -> str:
        """Process one synchronized pair; returns the session status."""
        if self.smap is None:
            rng_m = self._closest_range(frame_a.t)
            if rng_m is None:
                return "waiting"
            try:
                self.smap = bootstrap_pair(
                    frame_a, frame_b, rng_m, self.cam, self.cfg,
                    self.mapper_cfg, self.rng, self.sigma_px,
                    kf_id_a=self._next_id(0), kf_id_b=self._next_id(1))
            except (InsufficientMatches, DegenerateGeometry):
                self.kf_count = {0: 0, 1: 0}
                return "waiting"
            id_a, id_b = (0 << 56) | 0, (1 << 56) | 0
            self._fixed = (id_a,)
            self._anchor = (id_a, id_b, rng_m)
            for agent, frame in ((0, frame_a), (1, frame_b)):
                kf_id = (agent << 56) | 0
                self._kf_meta[agent].append((kf_id, frame.t))
            run_init_ba(self.smap, self.cam, self.cfg, self.sigma_px,
                        self._fixed, self._anchor)
            return "collecting"

        try:
            for agent, frame in ((0, frame_a), (1, frame_b)):
                kf_id = self._next_id(agent)
                extend_init_map(self.smap, frame, agent, kf_id, self.cam,
                                self.cfg, self.mapper_cfg, self.sigma_px,
                                self._fixed, self._anchor)
                self._kf_meta[agent].append((kf_id, frame.t))
        except AlignmentFailed:
            self.reset()
            return "reset"
        if self.ready():
            return "ready"
        return "collecting"

    def ready(self) -> bool:
        return (self.smap is not None
                and all(self.kf_count[a] >= self.cfg.target_keyframes
                        for a in (0, 1)))

    def finalize(self) -> tuple[comms.InitBundleMsg, InitResult]:
        """Inertial alignment plus bundle construction.

        Raises ExcitationTooLow on degenerate motion and AlignmentFailed
        when the map fails the reprojection quality bar.
        """
        if not self.ready():
            raise AlignmentFailed("not enough keyframes")
        med = median_reprojection_px(self.smap, self.cam, self.sigma_px)
        if med > 2.0:
            raise AlignmentFailed(f"median reprojection {med:.2f} sigma")
        kf_sets = {
            a: [(kf_id, t, self.smap.kfs[kf_id].pose)
                for kf_id, t in self._kf_meta[a]]
            for a in (0, 1)
        }
        imu = {}
        for a in (0, 1):
            if not self.imu[a]:
                raise ExcitationTooLow(f"agent {a}: no inertial samples")
            t = np.array([s[0] for s in self.imu[a]])
            accel = np.vstack([s[1] for s in self.imu[a]])
            gyro = np.vstack([s[2] for s in self.imu[a]])
            imu[a] = (t, accel, gyro)
        result = imu_init(kf_sets, imu, self.cfg)
        bundle = build_bundle(self.smap, result, sender=self.smap.agent)
        return bundle, result
