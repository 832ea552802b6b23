import numpy as np
import pytest

from vbslam.backend import (
    Problem,
    RangeMeasurement,
    Window,
    WindowKf,
    apply_window,
    build_problem,
    build_window,
    consensus_residual,
    jacobian_sparsity_report,
    prune_map,
    range_residual,
    reprojection_residual,
    shift_window,
    solve_local,
)
from vbslam.camera import CameraModel
from vbslam.config import BackendConfig, MapperConfig
from vbslam.geom import Pose, exp_map, quat_mul, yaw_quat
from vbslam.mapper import Keyframe, MapPoint, SlamMap

from conftest import random_pose, rel_error


def _make_cam():
    return CameraModel(T_CS=Pose())


def _synthetic_map(rng, n_kf=6, n_mp=40, agents=(0,), noise=0.0, dt=0.15):
    """Keyframes on a line at z=20 looking down at ground points."""
    cam = _make_cam()
    smap = SlamMap(agent=0)
    pts = np.column_stack([
        rng.uniform(-15, 15, n_mp), rng.uniform(-10, 10, n_mp),
        rng.uniform(-0.5, 0.5, n_mp)])
    kf_poses = {}
    counter = 0
    for k in range(n_kf):
        for agent in agents:
            q = quat_mul(yaw_quat(0.05 * k), np.array([0.0, 1.0, 0.0, 0.0]))
            p = np.array([2.0 * k * dt * 4, 1.5 * agent, 20.0 + 0.3 * k])
            pose = Pose(q, p)
            uv = []
            for m in pts:
                m_S = pose.rotation().T @ (m - p)
                uv.append(cam.project(m_S) + rng.standard_normal(2) * noise)
            kf_id = (agent << 56) | counter
            kf = Keyframe(
                kf_id=kf_id, agent=agent, t=k * dt, uv=np.array(uv),
                octave=np.zeros(n_mp, dtype=np.uint8),
                desc=np.zeros((n_mp, 48), dtype=np.uint8), pose=pose,
                cov6=np.eye(6) * 1e-4, native=(agent == 0))
            smap.add_keyframe(kf)
            kf_poses[kf_id] = pose
        counter += 1
    for j, m in enumerate(pts):
        mp = MapPoint(j + 1, m.copy(), np.eye(3) * 0.01,
                      np.zeros(48, dtype=np.uint8))
        for kf_id, kf in smap.kfs.items():
            mp.obs[kf_id] = j
        smap.mps[mp.mp_id] = mp
    return smap, cam, pts


# -- term Jacobians vs finite differences -----------------------------------


def test_reprojection_term_jacobians_fd(rng):
    cam = _make_cam()
    for _ in range(50):
        pose = Pose(
            quat_mul(exp_map(rng.standard_normal(3) * 0.1),
                     np.array([0.0, 1.0, 0.0, 0.0])),
            np.array([*rng.uniform(-2, 2, 2), 20.0 + rng.uniform(-2, 2)]))
        m = np.array([*rng.uniform(-5, 5, 2), rng.uniform(-1, 1)])
        uv = np.array([380.0, 250.0])
        r0, Jp, Jm, ok = reprojection_residual(pose, m, uv, 0.5, cam)
        assert ok
        h = 1e-6
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            rp = reprojection_residual(pose.retract(d), m, uv, 0.5, cam)[0]
            rm = reprojection_residual(pose.retract(-d), m, uv, 0.5, cam)[0]
            assert rel_error((rp - rm) / (2 * h), Jp[:, k]) < 1e-5
        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            rp = reprojection_residual(pose, m + d, uv, 0.5, cam)[0]
            rm = reprojection_residual(pose, m - d, uv, 0.5, cam)[0]
            assert rel_error((rp - rm) / (2 * h), Jm[:, k]) < 1e-5


@pytest.mark.parametrize("basis", ["z", "bspline"])
def test_range_term_jacobians_fd(rng, basis):
    meas = RangeMeasurement(
        t=0.0, d=2.0, sigma=0.1,
        antenna_a=np.array([0.1, 0.02, -0.05]),
        antenna_b=np.array([-0.07, 0.1, 0.03]))
    for _ in range(25):
        poses_a = [random_pose(rng, 1.0) for _ in range(4)]
        poses_b = [random_pose(rng, 1.0) for _ in range(4)]
        poses_b = [Pose(p.q, p.p + np.array([3.0, 0, 0])) for p in poses_b]
        ua, ub = rng.uniform(0.1, 0.9, 2)
        r0, Ja, Jb, ok = range_residual(poses_a, poses_b, ua, ub, meas, basis)
        assert ok
        h = 1e-6
        for c in range(4):
            for k in range(6):
                d = np.zeros(6)
                d[k] = h
                pa = [p.retract(d) if i == c else p for i, p in enumerate(poses_a)]
                rp = range_residual(pa, poses_b, ua, ub, meas, basis)[0]
                pa = [p.retract(-d) if i == c else p for i, p in enumerate(poses_a)]
                rm = range_residual(pa, poses_b, ua, ub, meas, basis)[0]
                fd = (rp - rm) / (2 * h)
                assert abs(fd - Ja[c, k]) < 1e-5 * max(1.0, abs(fd))
                pb = [p.retract(d) if i == c else p for i, p in enumerate(poses_b)]
                rp = range_residual(poses_a, pb, ua, ub, meas, basis)[0]
                pb = [p.retract(-d) if i == c else p for i, p in enumerate(poses_b)]
                rm = range_residual(poses_a, pb, ua, ub, meas, basis)[0]
                fd = (rp - rm) / (2 * h)
                assert abs(fd - Jb[c, k]) < 1e-5 * max(1.0, abs(fd))


def test_consensus_term_jacobian_fd(rng):
    for _ in range(50):
        pose = random_pose(rng, 2.0)
        ref = pose.retract(rng.standard_normal(6) * 0.1)
        z_bar = rng.standard_normal(6)
        r0, J = consensus_residual(pose, ref, z_bar, 10.0, 10.0)
        h = 1e-6
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            rp = consensus_residual(pose.retract(d), ref, z_bar, 10.0, 10.0)[0]
            rm = consensus_residual(pose.retract(-d), ref, z_bar, 10.0, 10.0)[0]
            assert rel_error((rp - rm) / (2 * h), J[:, k]) < 1e-5


def test_consensus_residual_value():
    # Consistent quadratic completion: sqrt(gamma/2) * (x + z/gamma).
    pose = Pose(p=np.array([1.0, 0.0, 0.0]))
    ref = Pose()
    r, _ = consensus_residual(pose, ref, np.zeros(6), 0.5, 0.5)
    np.testing.assert_allclose(r[3:], [0.5, 0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(r[:3], 0.0, atol=1e-15)
    # ||e_c||^2 must equal z^T x + (gamma/2) ||x||^2 up to a constant in x.
    gamma = 2.0
    z = np.array([0.0, 0.0, 0.0, 0.3, -0.2, 0.1])
    for x in (np.array([0.4, 0.0, -0.1]), np.zeros(3)):
        r, _ = consensus_residual(Pose(p=x), ref, z, gamma, gamma)
        lhs = float(r @ r) - float(z[3:] @ z[3:]) / (2 * gamma)
        rhs = float(z[3:] @ x) + 0.5 * gamma * float(x @ x)
        assert abs(lhs - rhs) < 1e-12


# -- window plumbing ---------------------------------------------------------


def test_build_and_shift_window(rng):
    smap, cam, _ = _synthetic_map(rng, n_kf=8)
    win = build_window(smap, sigma_obs=0.5)
    assert len(win.kfs) == 8
    assert len(win.mp_pos) == 40
    # 5 s horizon at 0.15 s spacing keeps 33 or 34 keyframes.
    assert int(np.floor(5.0 / 0.15)) + 1 in (34,)
    shifted = shift_window(win, horizon=0.45)
    assert len(shifted.kfs) == 4  # t in [0.6, 1.05]
    assert all(k.t >= win.newest_t() - 0.45 - 1e-9 for k in shifted.kfs)

    # A map point observed only by removed keyframes disappears.
    smap2, _, _ = _synthetic_map(rng, n_kf=8)
    lone = MapPoint(999, np.zeros(3), np.eye(3), np.zeros(48, dtype=np.uint8))
    first = min(smap2.kfs, key=lambda k: smap2.kfs[k].t)
    lone.obs[first] = 0
    smap2.mps[999] = lone
    win2 = build_window(smap2, sigma_obs=0.5)
    shifted2 = shift_window(win2, horizon=0.45)
    assert 999 not in shifted2.mp_pos


def test_shift_window_no_change_within_horizon(rng):
    smap, cam, _ = _synthetic_map(rng, n_kf=6)
    win = build_window(smap, sigma_obs=0.5)
    out = shift_window(win, horizon=5.0)
    assert len(out.kfs) == len(win.kfs)
    assert set(out.mp_pos) == set(win.mp_pos)


def test_prune_map_matches_shift_rule(rng):
    smap, _, _ = _synthetic_map(rng, n_kf=8)
    prune_map(smap, horizon=0.45)
    assert len(smap.kfs) == 4
    assert all(len(mp.obs) == 4 for mp in smap.mps.values())


# -- solver ------------------------------------------------------------------


def test_solver_zero_update_at_optimum(rng):
    smap, cam, _ = _synthetic_map(rng, noise=0.0)
    win = build_window(smap, sigma_obs=0.5)
    win.fixed = {min(win.kf_by_id(k.kf_id).kf_id for k in win.kfs)}
    before = {k.kf_id: k.pose.copy() for k in win.kfs}
    prob = build_problem(win, None, BackendConfig(consensus=False), cam)
    info = solve_local(prob)
    assert info["cost_final"] <= info["cost_initial"] + 1e-12
    assert info["cost_initial"] < 1e-16
    for k in win.kfs:
        assert np.linalg.norm(k.pose.p - before[k.kf_id].p) < 1e-9


def test_solver_recovers_from_perturbation(rng):
    smap, cam, pts = _synthetic_map(rng, noise=0.0)
    win = build_window(smap, sigma_obs=0.5)
    first = sorted(win.kfs, key=lambda k: k.t)[0].kf_id
    win.fixed = {first}
    for k in win.kfs:
        if k.kf_id != first:
            k.pose = k.pose.retract(
                np.concatenate([rng.standard_normal(3) * np.radians(0.5),
                                rng.standard_normal(3) * 0.01]))
    prob = build_problem(win, None, BackendConfig(consensus=False), cam)
    info = solve_local(prob, max_iters=3)
    assert info["cost_final"] < 0.1 * info["cost_initial"]


def test_solver_with_uwb_and_consensus_runs(rng):
    smap, cam, _ = _synthetic_map(rng, n_kf=6, agents=(0, 1), noise=0.2)
    win = build_window(smap, sigma_obs=0.5)
    ranges = []
    for k in range(2, 4):
        ka = [x for x in win.agent_knots(0)][k]
        kb = [x for x in win.agent_knots(1)][k]
        d = np.linalg.norm(ka.pose.p - kb.pose.p)
        ranges.append(RangeMeasurement(ka.t, d, 0.1, np.zeros(3), np.zeros(3)))
    duals = {k.kf_id: np.zeros(6) for k in win.kfs}
    prob = build_problem(win, duals, BackendConfig(), cam, ranges=ranges)
    info = solve_local(prob)
    assert info["cost_final"] <= info["cost_initial"]
    assert len(prob.consensus_terms) == len(win.kfs)
    assert len(prob._range_segments) == 2


def test_range_residual_zero_at_exact_geometry():
    poses_a = [Pose(p=np.array([0.1 * k, 0.0, 0.0])) for k in range(4)]
    poses_b = [Pose(p=np.array([0.1 * k, 2.0, 0.0])) for k in range(4)]
    meas = RangeMeasurement(0.0, 2.0, 0.1, np.zeros(3), np.zeros(3))
    r, _, _, ok = range_residual(poses_a, poses_b, 0.0, 0.0, meas)
    assert ok and abs(r) < 1e-12


def test_range_interpolation_exact_at_knot():
    # At u = 0 the interpolated pose is the second control pose exactly.
    poses = [random_pose(np.random.default_rng(k), 1.0) for k in range(4)]
    from vbslam.spline import interpolate_pose
    pose = interpolate_pose(poses, 0.0, "z")
    np.testing.assert_allclose(pose.p, poses[1].p, atol=1e-12)
    np.testing.assert_allclose(
        np.abs(np.dot(pose.q, poses[1].q)), 1.0, atol=1e-12)


def test_gamma_zero_reduces_to_local_problem(rng):
    smap, cam, _ = _synthetic_map(rng, noise=0.1)
    win = build_window(smap, sigma_obs=0.5)
    duals = {k.kf_id: np.zeros(6) for k in win.kfs}
    cfg = BackendConfig(gamma_p=0.0, gamma_q=0.0)
    prob = build_problem(win, duals, cfg, cam)
    assert prob.consensus_terms == []
    plain = build_problem(win, None, BackendConfig(consensus=False), cam)
    assert abs(prob.cost() - plain.cost()) < 1e-12


def test_scale_gauge_broken_only_by_uwb(rng):
    smap, cam, _ = _synthetic_map(rng, n_kf=6, agents=(0, 1), noise=0.0)
    win = build_window(smap, sigma_obs=0.5)
    cfg = BackendConfig(consensus=False)
    prob = build_problem(win, None, cfg, cam)
    cost0 = prob.cost()
    scaled = build_window(smap, sigma_obs=0.5)
    for k in scaled.kfs:
        k.pose = Pose(k.pose.q, k.pose.p * 1.05)
    scaled.mp_pos = {m: p * 1.05 for m, p in scaled.mp_pos.items()}
    prob_scaled = build_problem(scaled, None, cfg, cam)
    assert abs(prob_scaled.cost() - cost0) < 1e-9  # invariant without ranges

    ka = win.agent_knots(0)[2]
    kb = win.agent_knots(1)[2]
    meas = RangeMeasurement(ka.t, np.linalg.norm(ka.pose.p - kb.pose.p), 0.1,
                            np.zeros(3), np.zeros(3))
    with_uwb = build_problem(scaled, None, cfg, cam, ranges=[meas])
    assert with_uwb.cost() - prob_scaled.cost() > 0.3  # scale now penalized


# -- sparsity accounting -------------------------------------------------------


def test_sparsity_empty_problem():
    prob = build_problem(Window(), None, BackendConfig(), _make_cam())
    rep = jacobian_sparsity_report(prob, "z")
    assert rep.jacobian_nnz == 0 and rep.hessian_nnz == 0


def test_sparsity_pose_block_ratio(rng):
    smap, cam, _ = _synthetic_map(rng, n_kf=10)
    win = build_window(smap, sigma_obs=0.5)
    prob = build_problem(win, None, BackendConfig(consensus=False), cam)
    rep_z = jacobian_sparsity_report(prob, "z")
    rep_b = jacobian_sparsity_report(prob, "bspline")
    assert rep_z.jacobian_pose_blocks * 4 == rep_b.jacobian_pose_blocks
    assert rep_b.hessian_nnz > rep_z.hessian_nnz


def test_apply_window_marks_optimized(rng):
    smap, cam, _ = _synthetic_map(rng, noise=0.1)
    win = build_window(smap, sigma_obs=0.5)
    win.mp_pos = {m: p + 0.01 for m, p in win.mp_pos.items()}
    apply_window(smap, win)
    assert all(mp.optimized_once for mp in smap.mps.values())
    any_id = next(iter(win.mp_pos))
    np.testing.assert_allclose(smap.mps[any_id].position, win.mp_pos[any_id])
