"""Local mapping: keyframe bookkeeping, triangulation, and map-point EKFs.

Each agent owns its map.  Keyframes from both agents enter it (native ones
from the local tracker, non-native ones from the wire); map points are
triangulated between the newest native keyframe and a small set of partner
keyframes chosen by a tolerant-loss score that prefers wide triangulation
angles, agreeing view directions, and non-native partners.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel, reprojection_chain, reprojection_chain_many
from .config import MapperConfig
from .geom import Pose, quat_to_rot, skew
from .tracker import MapSnapshot, hamming_many, match_projections


class DegenerateGeometry(Exception):
    """Triangulation geometry is unusable (tiny baseline or parallel rays)."""


@dataclass
class Keyframe:
    kf_id: int
    agent: int
    t: float
    uv: np.ndarray
    octave: np.ndarray
    desc: np.ndarray
    pose: Pose
    cov6: np.ndarray
    native: bool
    # Fixed consensus reference: the tracked pose at creation time.
    ref_pose: Pose = None
    bound: np.ndarray = None  # kp index -> mp id or -1
    truth_id: np.ndarray = None  # simulation-only diagnostics

    def __post_init__(self):
        if self.ref_pose is None:
            self.ref_pose = self.pose.copy()
        if self.bound is None:
            self.bound = np.full(self.uv.shape[0], -1, dtype=np.int64)

    def camera_center(self, cam: CameraModel) -> np.ndarray:
        return self.pose.apply(cam.T_CS.inverse().p)

    def optical_axis(self, cam: CameraModel) -> np.ndarray:
        R_SC = quat_to_rot(cam.T_CS.q).T
        return quat_to_rot(self.pose.q) @ (R_SC @ np.array([0.0, 0.0, 1.0]))


@dataclass
class MapPoint:
    mp_id: int
    position: np.ndarray
    cov: np.ndarray
    desc: np.ndarray
    obs: dict = field(default_factory=dict)  # kf_id -> keypoint index
    optimized_once: bool = False


class SlamMap:
    def __init__(self, agent: int):
        self.agent = agent
        self.kfs: dict[int, Keyframe] = {}
        self.mps: dict[int, MapPoint] = {}
        self._next_mp = 0

    def new_mp_id(self) -> int:
        self._next_mp += 1
        return (self.agent << 56) | self._next_mp

    def add_keyframe(self, kf: Keyframe) -> None:
        self.kfs[kf.kf_id] = kf

    def snapshot(self) -> MapSnapshot:
        n = len(self.mps)
        ids = np.empty(n, dtype=np.int64)
        pos = np.empty((n, 3))
        covs = np.empty((n, 3, 3))
        descs = np.empty((n, 48), dtype=np.uint8)
        for k, mp in enumerate(self.mps.values()):
            ids[k] = mp.mp_id
            pos[k] = mp.position
            covs[k] = mp.cov
            descs[k] = mp.desc
        return MapSnapshot(ids, pos, covs, descs)

    def keyframes_by_time(self, agent: int | None = None) -> list[Keyframe]:
        kfs = [k for k in self.kfs.values() if agent is None or k.agent == agent]
        kfs.sort(key=lambda k: k.t)
        return kfs


def tolerant_loss(x, a: float, b: float, c: float):
    """Soft hinge on (x - c)^2 with dead-zone width a and softness b.

    Zero at x == c by construction; grows smoothly once (x - c)^2 exceeds a.
    """
    x = np.asarray(x, dtype=float)
    raw = b * np.logaddexp(0.0, ((x - c) ** 2 - a) / b)
    return raw - b * np.logaddexp(0.0, -a / b)


def pair_score(
    target: Keyframe, cand: Keyframe, cam: CameraModel, depth: float, cfg: MapperConfig
) -> float:
    """Penalty for triangulating against cand; lower is better."""
    d_t = target.optical_axis(cam)
    d_c = cand.optical_axis(cam)
    alpha_v = float(np.arccos(np.clip(d_t @ d_c, -1.0, 1.0)))
    # Triangulation angle subtended at a representative scene point.
    scene = target.camera_center(cam) + depth * d_t
    r_t = target.camera_center(cam) - scene
    r_c = cand.camera_center(cam) - scene
    denom = np.linalg.norm(r_t) * np.linalg.norm(r_c)
    if denom < 1e-9:
        return float("inf")
    alpha_t = float(np.arccos(np.clip(r_t @ r_c / denom, -1.0, 1.0)))
    beta = cfg.native_weight if cand.native else 1.0
    return beta * (
        float(tolerant_loss(alpha_v, cfg.a_v, cfg.b_v, cfg.c_v))
        + float(tolerant_loss(alpha_t, cfg.a_t, cfg.b_t, cfg.c_t))
    )


def score_candidates(
    smap: SlamMap, target: Keyframe, cam: CameraModel, depth: float, cfg: MapperConfig
) -> list[tuple[float, int]]:
    scored = []
    for kf in smap.kfs.values():
        if kf.kf_id == target.kf_id:
            continue
        scored.append((pair_score(target, kf, cam, depth, cfg), kf.kf_id))
    scored.sort(key=lambda sc: (sc[0], sc[1]))
    return scored


def match_2d2d(
    kf_a: Keyframe, kf_b: Keyframe, cfg: MapperConfig, unbound_only: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Mutual-best descriptor matches below the Hamming threshold."""
    ia = np.flatnonzero(kf_a.bound < 0) if unbound_only else np.arange(len(kf_a.uv))
    ib = np.flatnonzero(kf_b.bound < 0) if unbound_only else np.arange(len(kf_b.uv))
    if ia.size == 0 or ib.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    d = hamming_many(kf_a.desc[ia], kf_b.desc[ib])
    best_b = np.argmin(d, axis=1)
    best_a = np.argmin(d, axis=0)
    rows = np.arange(ia.size)
    mutual = best_a[best_b[rows]] == rows
    good = mutual & (d[rows, best_b[rows]] <= cfg.hamming_threshold)
    return ia[rows[good]], ib[best_b[rows[good]]]


def sampson_gate(
    kf_i: Keyframe,
    kf_j: Keyframe,
    idx_i: np.ndarray,
    idx_j: np.ndarray,
    cam: CameraModel,
    thresh_px: float,
) -> np.ndarray:
    """Epipolar consistency mask from the predicted relative pose."""
    if idx_i.size == 0:
        return np.zeros(0, dtype=bool)
    T_Ci_M = cam.T_CS @ kf_i.pose.inverse()
    T_Cj_M = cam.T_CS @ kf_j.pose.inverse()
    T_ji = T_Cj_M @ T_Ci_M.inverse()
    E = skew(T_ji.p) @ quat_to_rot(T_ji.q)
    Ki = np.array([[cam.fx, 0, cam.cx], [0, cam.fy, cam.cy], [0, 0, 1.0]])
    Kinv = np.linalg.inv(Ki)
    F = Kinv.T @ E @ Kinv
    x1 = np.column_stack([kf_i.uv[idx_i], np.ones(idx_i.size)])
    x2 = np.column_stack([kf_j.uv[idx_j], np.ones(idx_j.size)])
    Fx1 = x1 @ F.T
    Ftx2 = x2 @ F
    num = np.einsum("ni,ni->n", x2, Fx1)
    den = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    sampson_sq = num * num / np.maximum(den, 1e-12)
    return sampson_sq < thresh_px * thresh_px


def triangulate_pair(
    kf_i: Keyframe,
    kf_j: Keyframe,
    idx_i: np.ndarray,
    idx_j: np.ndarray,
    cam: CameraModel,
    cfg: MapperConfig,
    sigma_px: float,
) -> list[tuple[int, int, np.ndarray, np.ndarray]]:
    """Linear (DLT) triangulation of matched keypoints.

    Returns tuples (kp_i, kp_j, position, covariance).  Raises
    DegenerateGeometry when the camera baseline is below the minimum or every
    candidate pair has near-parallel rays.
    """
    c_i = kf_i.camera_center(cam)
    c_j = kf_j.camera_center(cam)
    if np.linalg.norm(c_i - c_j) <= cfg.min_baseline:
        raise DegenerateGeometry("baseline too small")

    T_Ci_M = cam.T_CS @ kf_i.pose.inverse()
    T_Cj_M = cam.T_CS @ kf_j.pose.inverse()
    P_i = T_Ci_M.to_matrix()[:3]
    P_j = T_Cj_M.to_matrix()[:3]
    R_i = quat_to_rot(kf_i.pose.q) @ quat_to_rot(cam.T_CS.q).T
    R_j = quat_to_rot(kf_j.pose.q) @ quat_to_rot(cam.T_CS.q).T

    out = []
    n_parallel = 0
    for a, b in zip(idx_i, idx_j):
        x_i = cam.unproject(kf_i.uv[a])
        x_j = cam.unproject(kf_j.uv[b])
        # Ray directions in the map frame for the angle check.
        r_i = R_i @ np.array([x_i[0], x_i[1], 1.0])
        r_j = R_j @ np.array([x_j[0], x_j[1], 1.0])
        cosang = r_i @ r_j / (np.linalg.norm(r_i) * np.linalg.norm(r_j))
        if cosang > np.cos(cfg.min_tri_angle):
            n_parallel += 1
            continue
        A = np.vstack(
            [
                x_i[0] * P_i[2] - P_i[0],
                x_i[1] * P_i[2] - P_i[1],
                x_j[0] * P_j[2] - P_j[0],
                x_j[1] * P_j[2] - P_j[1],
            ]
        )
        _, _, Vt = np.linalg.svd(A)
        hom = Vt[-1]
        if abs(hom[3]) < 1e-12:
            continue
        m = hom[:3] / hom[3]
        z_i = (T_Ci_M.apply(m))[2]
        z_j = (T_Cj_M.apply(m))[2]
        if z_i <= 0.0 or z_j <= 0.0:
            continue
        uv_i, Jp_i, Jm_i, ok_i = reprojection_chain(kf_i.pose, m, cam)
        uv_j, Jp_j, Jm_j, ok_j = reprojection_chain(kf_j.pose, m, cam)
        if not (ok_i and ok_j):
            continue
        s_i = sigma_px * 2.0 ** float(kf_i.octave[a])
        s_j = sigma_px * 2.0 ** float(kf_j.octave[b])
        if (
            np.linalg.norm(uv_i - kf_i.uv[a]) > cfg.reproj_gate_sigma * s_i
            or np.linalg.norm(uv_j - kf_j.uv[b]) > cfg.reproj_gate_sigma * s_j
        ):
            continue
        cov = _triangulation_covariance(
            Jm_i, Jp_i, Jm_j, Jp_j, s_i, s_j, kf_i.cov6, kf_j.cov6
        )
        out.append((int(a), int(b), m, cov))

    if not out and idx_i.size and n_parallel == idx_i.size:
        raise DegenerateGeometry("all candidate rays near-parallel")
    return out


def _triangulation_covariance(Jm_i, Jp_i, Jm_j, Jp_j, s_i, s_j, cov_i, cov_j):
    """First-order covariance of the triangulated point.

    Gauss-Newton information of (point, pose_i, pose_j) under the two
    reprojection factors plus pose priors; the returned block is the point
    marginal of its inverse.
    """
    J = np.zeros((16, 15))
    J[0:2, 0:3] = Jm_i
    J[0:2, 3:9] = Jp_i
    J[2:4, 0:3] = Jm_j
    J[2:4, 9:15] = Jp_j
    J[4:10, 3:9] = np.eye(6)
    J[10:16, 9:15] = np.eye(6)
    W = np.zeros((16, 16))
    W[0:2, 0:2] = np.eye(2) / s_i**2
    W[2:4, 2:4] = np.eye(2) / s_j**2
    W[4:10, 4:10] = np.linalg.inv(cov_i)
    W[10:16, 10:16] = np.linalg.inv(cov_j)
    info = J.T @ W @ J
    cov = np.linalg.inv(info)
    return 0.5 * (cov[:3, :3] + cov[:3, :3].T)


def mp_predict(mp: MapPoint, sigma_m: float) -> None:
    mp.cov = mp.cov + sigma_m**2 * np.eye(3)


def mp_update(
    mp: MapPoint, kf: Keyframe, kp_idx: int, cam: CameraModel, sigma_px: float
) -> None:
    """EKF update of one map point from one keyframe observation.

    Once the point has been optimized by the backend its position is frozen;
    the covariance still contracts.
    """
    uv, J_pose, J_point, ok = reprojection_chain(kf.pose, mp.position, cam)
    if not ok:
        return
    y = kf.uv[kp_idx] - uv
    H = -J_point  # residual Jacobian w.r.t. the point
    H_T = -J_pose  # residual Jacobian w.r.t. the keyframe pose
    s = sigma_px * 2.0 ** float(kf.octave[kp_idx])
    R = H_T @ kf.cov6 @ H_T.T + s * s * np.eye(2)
    S = H @ mp.cov @ H.T + R
    K = np.linalg.solve(S.T, (mp.cov @ H.T).T).T
    if not mp.optimized_once:
        mp.position = mp.position - K @ y
    cov = mp.cov - K @ S @ K.T
    mp.cov = 0.5 * (cov + cov.T)


def associate_keyframe(
    smap: SlamMap, kf: Keyframe, cam: CameraModel, cfg: MapperConfig
) -> list[tuple[int, int]]:
    """Bind existing map points to a keyframe's unbound keypoints."""
    snap = smap.snapshot()
    if len(snap) == 0:
        return []
    uv, _, _, valid = reprojection_chain_many(kf.pose, snap.positions, cam)
    free = kf.bound < 0
    mp_idx, kp_idx, _ = match_projections(
        uv, valid, snap.descs, kf.uv, kf.desc, cfg.match_radius,
        cfg.hamming_threshold,
    )
    out = []
    for mi, ki in zip(mp_idx, kp_idx):
        if not free[ki]:
            continue
        mp_id = int(snap.ids[mi])
        mp = smap.mps[mp_id]
        if kf.kf_id in mp.obs:
            continue
        mp.obs[kf.kf_id] = int(ki)
        kf.bound[ki] = mp_id
        out.append((mp_id, int(ki)))
    return out


def process_keyframe(
    smap: SlamMap,
    kf: Keyframe,
    cam: CameraModel,
    cfg: MapperConfig,
    sigma_px: float,
    tracker_matches: tuple[np.ndarray, np.ndarray] | None = None,
    scene_depth: float = 20.0,
) -> dict:
    """Full mapper tick for one new keyframe.

    Native keyframes arrive with the tracker's inlier matches, get new map
    points triangulated against scored partner keyframes, and refresh the
    map-point EKFs.  Non-native keyframes are associated by projection.
    """
    smap.add_keyframe(kf)
    for mp in smap.mps.values():
        mp_predict(mp, cfg.mp_process_noise)

    new_obs: list[tuple[int, int]] = []
    if tracker_matches is not None:
        for mp_id, ki in zip(*tracker_matches):
            mp = smap.mps.get(int(mp_id))
            if mp is None or kf.kf_id in mp.obs or kf.bound[ki] >= 0:
                continue
            mp.obs[kf.kf_id] = int(ki)
            kf.bound[ki] = int(mp_id)
            new_obs.append((int(mp_id), int(ki)))
    else:
        new_obs.extend(associate_keyframe(smap, kf, cam, cfg))

    for mp_id, ki in new_obs:
        mp_update(smap.mps[mp_id], kf, ki, cam, sigma_px)

    created = 0
    if kf.native:
        ranked = score_candidates(smap, kf, cam, scene_depth, cfg)
        for _, cand_id in ranked[: cfg.candidates]:
            if created >= cfg.budget:
                break
            cand = smap.kfs[cand_id]
            ia, ib = match_2d2d(kf, cand, cfg)
            if ia.size == 0:
                continue
            keep = sampson_gate(kf, cand, ia, ib, cam, cfg.sampson_gate)
            ia, ib = ia[keep], ib[keep]
            if ia.size == 0:
                continue
            try:
                tris = triangulate_pair(kf, cand, ia, ib, cam, cfg, sigma_px)
            except DegenerateGeometry:
                continue
            for a, b, pos, cov in tris:
                if created >= cfg.budget:
                    break
                if kf.bound[a] >= 0 or cand.bound[b] >= 0:
                    continue
                mp = MapPoint(
                    mp_id=smap.new_mp_id(),
                    position=pos,
                    cov=cov,
                    desc=kf.desc[a].copy(),
                    obs={kf.kf_id: int(a), cand.kf_id: int(b)},
                )
                smap.mps[mp.mp_id] = mp
                kf.bound[a] = mp.mp_id
                cand.bound[b] = mp.mp_id
                created += 1

    return {"new_obs": len(new_obs), "created": created}
