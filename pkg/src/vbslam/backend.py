"""Sliding-window bundle adjustment with consensus and range terms.

The window holds both agents' keyframe poses and the local map points.
Reprojection residuals attach directly to keyframe poses (the keyframes are
the interpolation base poses, and the interpolating basis passes through
them), range residuals interpolate both trajectories at the measurement
time and therefore touch four base poses per agent, and consensus residuals
implement the damped asynchronous dual-ascent scheme: the local quadratic
z_bar^T x + (gamma / 2) ||x||^2 is folded into least squares as
e_c = sqrt(gamma / 2) (x + z_bar / gamma), with x the pose offset from the
fixed per-keyframe reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .camera import CameraModel, reprojection_chain, reprojection_chain_many
from .config import BackendConfig
from .geom import (
    Pose,
    boxminus,
    gamma_jacobian_inv,
    quat_to_rot,
    rotate,
    skew,
)
from .mapper import SlamMap
from .spline import interpolation_jacobians


class SolverFailure(Exception):
    """Normal equations unsolvable even at maximum damping."""


@dataclass
class RangeMeasurement:
    t: float
    d: float
    sigma: float
    antenna_a: np.ndarray
    antenna_b: np.ndarray


@dataclass
class WindowKf:
    kf_id: int
    agent: int
    t: float
    pose: Pose
    ref_pose: Pose
    native: bool


@dataclass
class Window:
    """Optimization snapshot: poses, map points, and their observations."""

    kfs: list[WindowKf] = field(default_factory=list)
    mp_pos: dict[int, np.ndarray] = field(default_factory=dict)
    # kf_id -> (mp ids (k,), uv (k,2), sigma (k,))
    obs: dict[int, tuple] = field(default_factory=dict)
    fixed: set[int] = field(default_factory=set)

    def kf_by_id(self, kf_id: int) -> WindowKf:
        for kf in self.kfs:
            if kf.kf_id == kf_id:
                return kf
        raise KeyError(kf_id)

    def agent_knots(self, agent: int) -> list[WindowKf]:
        knots = [k for k in self.kfs if k.agent == agent]
        knots.sort(key=lambda k: k.t)
        return knots

    def newest_t(self) -> float:
        return max(k.t for k in self.kfs) if self.kfs else -np.inf


def build_window(
    smap: SlamMap,
    sigma_obs: float,
    horizon: float = np.inf,
    t_now: float | None = None,
    fixed_ids=(),
) -> Window:
    """Snapshot the in-horizon part of a map into an optimization window."""
    kf_list = sorted(smap.kfs.values(), key=lambda k: (k.t, k.kf_id))
    if not kf_list:
        return Window()
    t_ref = kf_list[-1].t if t_now is None else t_now
    kf_list = [k for k in kf_list if k.t >= t_ref - horizon - 1e-9]
    ids = {k.kf_id for k in kf_list}

    win = Window(fixed=set(fixed_ids) & ids)
    for kf in kf_list:
        win.kfs.append(
            WindowKf(kf.kf_id, kf.agent, kf.t, kf.pose.copy(), kf.ref_pose, kf.native)
        )

    per_kf: dict[int, list] = {}
    for mp in smap.mps.values():
        in_window = [kf_id for kf_id in mp.obs if kf_id in ids]
        if not in_window:
            continue
        win.mp_pos[mp.mp_id] = mp.position.copy()
        for kf_id in in_window:
            kp = mp.obs[kf_id]
            kf = smap.kfs[kf_id]
            sigma = sigma_obs * (2.0 ** float(kf.octave[kp]))
            per_kf.setdefault(kf_id, []).append((mp.mp_id, kf.uv[kp], sigma))
    for kf_id, rows in per_kf.items():
        win.obs[kf_id] = (
            np.array([r[0] for r in rows], dtype=np.int64),
            np.array([r[1] for r in rows]),
            np.array([r[2] for r in rows]),
        )
    return win


def shift_window(win: Window, horizon: float, t_now: float | None = None) -> Window:
    """Drop keyframes older than the horizon and orphaned map points."""
    t_ref = win.newest_t() if t_now is None else t_now
    keep = [k for k in win.kfs if k.t >= t_ref - horizon - 1e-9]
    ids = {k.kf_id for k in keep}
    out = Window(kfs=keep, fixed=win.fixed & ids)
    out.obs = {k: v for k, v in win.obs.items() if k in ids}
    seen = set()
    for mp_ids, _, _ in out.obs.values():
        seen.update(int(m) for m in mp_ids)
    out.mp_pos = {m: p for m, p in win.mp_pos.items() if m in seen}
    return out


def apply_window(smap: SlamMap, win: Window) -> None:
    """Publish optimized poses and map points back into the live map."""
    for kf in win.kfs:
        live = smap.kfs.get(kf.kf_id)
        if live is not None:
            live.pose = kf.pose.copy()
    for mp_id, pos in win.mp_pos.items():
        mp = smap.mps.get(mp_id)
        if mp is not None:
            mp.position = pos.copy()
            mp.optimized_once = True


def prune_map(smap: SlamMap, horizon: float, t_now: float | None = None) -> None:
    """Apply the window-shift rule to the live map itself."""
    if not smap.kfs:
        return
    t_ref = max(k.t for k in smap.kfs.values()) if t_now is None else t_now
    drop = [k for k, kf in smap.kfs.items() if kf.t < t_ref - horizon - 1e-9]
    for kf_id in drop:
        del smap.kfs[kf_id]
    dead = []
    for mp_id, mp in smap.mps.items():
        mp.obs = {k: v for k, v in mp.obs.items() if k in smap.kfs}
        if not mp.obs:
            dead.append(mp_id)
    for mp_id in dead:
        del smap.mps[mp_id]


# --------------------------------------------------------------------------
# Residual terms
# --------------------------------------------------------------------------


def _front_mask(pose: Pose, m: np.ndarray, cam: CameraModel) -> np.ndarray:
    """True where map points land in front of the camera."""
    R_MS = quat_to_rot(pose.q)
    R_CS = quat_to_rot(cam.T_CS.q)
    m_C = (m - pose.p) @ R_MS @ R_CS.T + cam.T_CS.p
    return m_C[:, 2] > 1e-6


def reprojection_residual(pose: Pose, m: np.ndarray, uv: np.ndarray, sigma: float,
                          cam: CameraModel):
    """Whitened reprojection residual with pose and point Jacobians."""
    uv_hat, J_pose, J_point, _ = reprojection_chain(pose, m, cam)
    if not np.any(J_point):
        return np.zeros(2), np.zeros((2, 6)), np.zeros((2, 3)), False
    r = (uv - uv_hat) / sigma
    return r, -J_pose / sigma, -J_point / sigma, True


def range_residual(
    poses_a: list[Pose],
    poses_b: list[Pose],
    u_a: float,
    u_b: float,
    meas: RangeMeasurement,
    basis: str = "z",
):
    """Whitened range residual with Jacobians w.r.t. 4 + 4 base poses.

    Returns (r, J_a (4,6), J_b (4,6)) ordered like the control poses.
    """
    pose_a, wa, Da = interpolation_jacobians(poses_a, u_a, basis)
    pose_b, wb, Db = interpolation_jacobians(poses_b, u_b, basis)
    ant_a = pose_a.apply(meas.antenna_a)
    ant_b = pose_b.apply(meas.antenna_b)
    diff = ant_a - ant_b
    dist = np.linalg.norm(diff)
    if dist < 1e-9:
        return 0.0, np.zeros((4, 6)), np.zeros((4, 6)), False
    g = diff / (dist * meas.sigma)
    r = (dist - meas.d) / meas.sigma

    # d(R(q(t)) antenna)/d theta(t) for a right perturbation of q(t).
    lever_a = -quat_to_rot(pose_a.q) @ skew(meas.antenna_a)
    lever_b = -quat_to_rot(pose_b.q) @ skew(meas.antenna_b)
    J_a = np.zeros((4, 6))
    J_b = np.zeros((4, 6))
    for c in range(4):
        J_a[c, :3] = g @ (lever_a @ Da[c])
        J_a[c, 3:] = g * wa[c]
        J_b[c, :3] = -g @ (lever_b @ Db[c])
        J_b[c, 3:] = -g * wb[c]
    return r, J_a, J_b, True


def consensus_residual(
    pose: Pose,
    ref_pose: Pose,
    z_bar: np.ndarray,
    gamma_q: float,
    gamma_p: float,
):
    """Consensus residual (6,) and its Jacobian (6,6) w.r.t. the pose.

    Ordering matches the pose tangent: rotation first, translation second.
    """
    dq = boxminus(pose.q, ref_pose.q)
    dp = pose.p - ref_pose.p
    sq = np.sqrt(0.5 * gamma_q)
    sp = np.sqrt(0.5 * gamma_p)
    r = np.concatenate([sq * (dq + z_bar[:3] / gamma_q),
                        sp * (dp + z_bar[3:] / gamma_p)])
    J = np.zeros((6, 6))
    J[:3, :3] = sq * gamma_jacobian_inv(dq)
    J[3:, 3:] = sp * np.eye(3)
    return r, J


def _cauchy_weight(sq_norm, scale):
    """IRLS weight rho'(s) for the Cauchy loss at squared residual s."""
    return 1.0 / (1.0 + sq_norm / (scale * scale))


def _cauchy_cost(sq_norm, scale):
    c2 = scale * scale
    return c2 * np.log1p(sq_norm / c2)


# --------------------------------------------------------------------------
# Problem assembly and the bounded Levenberg-Marquardt solver
# --------------------------------------------------------------------------


class Problem:
    def __init__(self, window: Window, cam: CameraModel, cfg: BackendConfig,
                 ranges=(), duals=None):
        self.window = window
        self.cam = cam
        self.cfg = cfg
        self.ranges = list(ranges)
        self.duals = duals or {}

        self.pose_ids = [k.kf_id for k in window.kfs if k.kf_id not in window.fixed]
        self.pose_index = {kf_id: i for i, kf_id in enumerate(self.pose_ids)}
        self.mp_ids = sorted(window.mp_pos)
        self.mp_index = {mp_id: j for j, mp_id in enumerate(self.mp_ids)}
        self._kf_map = {k.kf_id: k for k in window.kfs}

        self.consensus_terms = []
        if duals is not None and cfg.consensus and cfg.gamma_p > 0 and cfg.gamma_q > 0:
            for kf in window.kfs:
                if kf.kf_id in window.fixed:
                    continue
                z_bar = duals.get(kf.kf_id)
                if z_bar is None:
                    continue
                self.consensus_terms.append((kf.kf_id, kf.ref_pose, np.asarray(z_bar)))

        self._range_segments = self._locate_ranges()

    # -- range bookkeeping --------------------------------------------------

    def _locate_ranges(self):
        """Resolve each range measurement into per-agent knot quadruples."""
        knots = {a: self.window.agent_knots(a) for a in (0, 1)}
        out = []
        for meas in self.ranges:
            quads = []
            for agent in (0, 1):
                ks = knots[agent]
                if len(ks) < 4:
                    quads = None
                    break
                times = np.array([k.t for k in ks])
                j = int(np.searchsorted(times, meas.t, side="right") - 1)
                if j < 1 or j + 2 > len(ks) - 1:
                    quads = None
                    break
                dt = times[j + 1] - times[j]
                if dt <= 0:
                    quads = None
                    break
                u = (meas.t - times[j]) / dt
                quads.append(([ks[j - 1], ks[j], ks[j + 1], ks[j + 2]], float(u)))
            if quads is not None:
                out.append((meas, quads))
        return out

    # -- evaluation ----------------------------------------------------------

    def cost(self) -> float:
        total = 0.0
        cpx = self.cfg.cauchy_scale_px
        for kf_id, (mp_ids, uv, sigma) in self.window.obs.items():
            kf = self._kf_map[kf_id]
            m = np.array([self.window.mp_pos[int(i)] for i in mp_ids])
            uv_hat, _, _, _ = reprojection_chain_many(kf.pose, m, self.cam)
            usable = _front_mask(kf.pose, m, self.cam)
            r = (uv - uv_hat) / sigma[:, None]
            s = np.einsum("ni,ni->n", r, r)
            scale = cpx / sigma
            total += float(np.sum(_cauchy_cost(s, scale) * usable))
        for meas, quads in self._range_segments:
            (ka, ua), (kb, ub) = quads
            r, _, _, ok = range_residual(
                [k.pose for k in ka], [k.pose for k in kb], ua, ub, meas,
                self.cfg.basis)
            if ok:
                total += _cauchy_cost(r * r, self.cfg.cauchy_scale_range / meas.sigma)
        for kf_id, ref_pose, z_bar in self.consensus_terms:
            kf = self._kf_map[kf_id]
            r, _ = consensus_residual(kf.pose, ref_pose, z_bar,
                                      self.cfg.gamma_q, self.cfg.gamma_p)
            total += float(r @ r)
        return total

    def normal_equations(self):
        """Accumulate the Gauss-Newton system with IRLS robust weights."""
        n_p = len(self.pose_ids)
        n_m = len(self.mp_ids)
        A = np.zeros((6 * n_p, 6 * n_p))
        E = np.zeros((6 * n_p, 3 * n_m))
        C = np.zeros((n_m, 3, 3))
        g_p = np.zeros(6 * n_p)
        g_m = np.zeros(3 * n_m)
        cpx = self.cfg.cauchy_scale_px

        for kf_id, (mp_ids, uv, sigma) in self.window.obs.items():
            kf = self._kf_map[kf_id]
            m = np.array([self.window.mp_pos[int(i)] for i in mp_ids])
            uv_hat, J_pose, J_point, _ = reprojection_chain_many(kf.pose, m, self.cam)
            usable = _front_mask(kf.pose, m, self.cam)
            r = (uv_hat - uv) / sigma[:, None]  # residual sign folded into J
            w = _cauchy_weight(np.einsum("ni,ni->n", r, r), cpx / sigma)
            w = np.where(usable, w, 0.0)
            sw = np.sqrt(w) / sigma
            Jp = J_pose * sw[:, None, None]
            Jm = J_point * sw[:, None, None]
            rw = r * np.sqrt(w)[:, None]

            midx = np.array([self.mp_index[int(i)] for i in mp_ids])
            CtJ = np.einsum("nij,nik->njk", Jm, Jm)
            np.add.at(C, midx, CtJ)
            gm_blocks = np.einsum("nij,ni->nj", Jm, rw)
            np.add.at(g_m.reshape(n_m, 3), midx, gm_blocks)

            pi = self.pose_index.get(kf_id)
            if pi is not None:
                A_blk = np.einsum("nij,nik->jk", Jp, Jp)
                A[6 * pi:6 * pi + 6, 6 * pi:6 * pi + 6] += A_blk
                g_p[6 * pi:6 * pi + 6] += np.einsum("nij,ni->j", Jp, rw)
                E_blocks = np.einsum("nij,nik->njk", Jp, Jm)
                for n, mj in enumerate(midx):
                    E[6 * pi:6 * pi + 6, 3 * mj:3 * mj + 3] += E_blocks[n]

        for meas, quads in self._range_segments:
            (ka, ua), (kb, ub) = quads
            r, J_a, J_b, ok = range_residual(
                [k.pose for k in ka], [k.pose for k in kb], ua, ub, meas,
                self.cfg.basis)
            if not ok:
                continue
            w = _cauchy_weight(r * r, self.cfg.cauchy_scale_range / meas.sigma)
            sw = np.sqrt(w)
            rows = []
            for kf, J in list(zip(ka, J_a)) + list(zip(kb, J_b)):
                pi = self.pose_index.get(kf.kf_id)
                if pi is not None:
                    rows.append((pi, J * sw))
            for pi, J in rows:
                g_p[6 * pi:6 * pi + 6] += J * (r * sw)
                for pj, Jj in rows:
                    A[6 * pi:6 * pi + 6, 6 * pj:6 * pj + 6] += np.outer(J, Jj)

        for kf_id, ref_pose, z_bar in self.consensus_terms:
            kf = self._kf_map[kf_id]
            r, J = consensus_residual(kf.pose, ref_pose, z_bar,
                                      self.cfg.gamma_q, self.cfg.gamma_p)
            pi = self.pose_index[kf_id]
            A[6 * pi:6 * pi + 6, 6 * pi:6 * pi + 6] += J.T @ J
            g_p[6 * pi:6 * pi + 6] += J.T @ r

        return A, E, C, g_p, g_m

    def retract(self, dx_p: np.ndarray, dx_m: np.ndarray):
        """New (poses, mp positions) after a manifold step; state untouched."""
        poses = {}
        for kf in self.window.kfs:
            pi = self.pose_index.get(kf.kf_id)
            if pi is None:
                poses[kf.kf_id] = kf.pose
            else:
                poses[kf.kf_id] = kf.pose.retract(dx_p[6 * pi:6 * pi + 6])
        mps = {
            mp_id: self.window.mp_pos[mp_id] + dx_m[3 * j:3 * j + 3]
            for mp_id, j in self.mp_index.items()
        }
        return poses, mps

    def write_state(self, poses, mps) -> None:
        for kf in self.window.kfs:
            kf.pose = poses[kf.kf_id]
        self.window.mp_pos = mps


def build_problem(
    window: Window,
    duals,
    cfg: BackendConfig,
    cam: CameraModel,
    ranges=(),
) -> Problem:
    return Problem(window, cam, cfg, ranges=ranges, duals=duals)


def _schur_step(A, E, C, g_p, g_m, lam):
    n_m = C.shape[0]
    C_d = C + lam * np.eye(3)
    try:
        C_inv = np.linalg.inv(C_d)
    except np.linalg.LinAlgError:
        return None
    A_d = A + lam * np.eye(A.shape[0])
    if n_m:
        EC = np.einsum("pmk,mkl->pml", E.reshape(A.shape[0], n_m, 3), C_inv)
        EC = EC.reshape(A.shape[0], 3 * n_m)
        S = A_d - EC @ E.T
        rhs = -g_p + EC @ g_m
    else:
        S = A_d
        rhs = -g_p
    if S.size:
        try:
            cf = scipy.linalg.cho_factor(S, check_finite=False)
            dx_p = scipy.linalg.cho_solve(cf, rhs, check_finite=False)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
            return None
    else:
        dx_p = np.zeros(0)
    if n_m:
        resid = (g_m + E.T @ dx_p).reshape(n_m, 3)
        dx_m = -np.einsum("mkl,ml->mk", C_inv, resid).reshape(-1)
    else:
        dx_m = np.zeros(0)
    return dx_p, dx_m


def solve_local(problem: Problem, max_iters: int | None = None) -> dict:
    """Bounded-iteration damped Gauss-Newton on the window.

    Only cost-decreasing steps are accepted; a failed or cost-increasing
    step raises the damping and retries within the iteration budget.
    """
    cfg = problem.cfg
    iters = cfg.max_lm_iters if max_iters is None else max_iters
    lam = cfg.lambda0
    cost = problem.cost()
    info = {"cost_initial": cost, "iterations": 0, "accepted": 0}

    for _ in range(iters):
        info["iterations"] += 1
        A, E, C, g_p, g_m = problem.normal_equations()
        accepted = False
        for _ in range(6):
            step = _schur_step(A, E, C, g_p, g_m, lam)
            if step is None:
                lam *= 10.0
                if lam > 1e10:
                    raise SolverFailure("normal equations not solvable")
                continue
            dx_p, dx_m = step
            poses, mps = problem.retract(dx_p, dx_m)
            old_poses = {kf.kf_id: kf.pose for kf in problem.window.kfs}
            old_mps = problem.window.mp_pos
            problem.write_state(poses, mps)
            new_cost = problem.cost()
            if new_cost <= cost + 1e-12:
                cost = new_cost
                lam = max(lam / 3.0, 1e-9)
                accepted = True
                info["accepted"] += 1
                break
            problem.write_state(old_poses, old_mps)
            lam *= 10.0
        if not accepted:
            break

    info["cost_final"] = cost
    return info


# --------------------------------------------------------------------------
# Structural sparsity accounting
# --------------------------------------------------------------------------


@dataclass
class SparsityReport:
    jacobian_nnz: int
    hessian_nnz: int
    jacobian_pose_blocks: int
    jacobian_mp_blocks: int
    hessian_pose_blocks: int
    hessian_mp_pose_blocks: int


def _bspline_segment(idx: int, n: int) -> tuple[int, ...]:
    """Four distinct control indices covering knot idx, shifted at edges."""
    lo = min(max(idx - 1, 0), max(n - 4, 0))
    return tuple(range(lo, min(lo + 4, n)))


def jacobian_sparsity_report(problem: Problem, interpolation: str = "z") -> SparsityReport:
    """Structural nonzero counts for one interpolation mode.

    Pose-block support of a reprojection term: the single owning keyframe
    for the interpolating basis, the four surrounding base poses for the
    B-spline basis. Range terms touch four poses per agent in both modes.
    """
    win = problem.window
    agents = sorted({k.agent for k in win.kfs})
    knots = {a: win.agent_knots(a) for a in agents}
    knot_pos = {}
    for a in agents:
        for i, kf in enumerate(knots[a]):
            knot_pos[kf.kf_id] = (a, i)

    def pose_support(kf_id: int) -> list[int]:
        if interpolation == "z":
            return [kf_id] if kf_id in problem.pose_index else []
        a, i = knot_pos[kf_id]
        seg = _bspline_segment(i, len(knots[a]))
        ids = [knots[a][j].kf_id for j in seg]
        return [k for k in ids if k in problem.pose_index]

    jac_nnz = 0
    jac_pose_blocks = 0
    jac_mp_blocks = 0
    pose_pairs = set()
    mp_pose_pairs = set()

    for kf_id, (mp_ids, _, _) in win.obs.items():
        support = pose_support(kf_id)
        k = len(mp_ids)
        jac_pose_blocks += k * len(support)
        jac_mp_blocks += k
        jac_nnz += k * (len(support) * 12 + 6)
        for pa in support:
            for pb in support:
                pose_pairs.add((pa, pb))
        for mp_id in mp_ids:
            for pa in support:
                mp_pose_pairs.add((int(mp_id), pa))

    for meas, quads in problem._range_segments:
        ids = []
        for ks, _ in quads:
            ids.extend(k.kf_id for k in ks if k.kf_id in problem.pose_index)
        jac_nnz += 6 * len(ids)
        for pa in ids:
            for pb in ids:
                pose_pairs.add((pa, pb))

    for kf_id, _, _ in problem.consensus_terms:
        jac_nnz += 12  # block-diagonal 6x6 with two 3x3 blocks
        pose_pairs.add((kf_id, kf_id))

    hessian_nnz = (
        36 * len(pose_pairs)
        + 9 * len(win.mp_pos)
        + 2 * 18 * len(mp_pose_pairs)
    )
    return SparsityReport(
        jacobian_nnz=jac_nnz,
        hessian_nnz=hessian_nnz,
        jacobian_pose_blocks=jac_pose_blocks,
        jacobian_mp_blocks=jac_mp_blocks,
        hessian_pose_blocks=len(pose_pairs),
        hessian_mp_pose_blocks=len(mp_pose_pairs),
    )
