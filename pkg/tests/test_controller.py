"""Formation-control geometry and closed-loop convergence tests."""

import numpy as np
import pytest

from vbslam import controller
from vbslam.config import ControllerConfig
from vbslam.controller import (CoincidentAgents, DepthEstimator,
                               FormationController, StereoTarget, TooFewPoints,
                               agent_targets, baseline_for, limit_step,
                               scene_depth, virtual_center, virtual_yaw,
                               wrap_angle)


class TestRigFrame:
    def test_center_and_yaw_along_x(self):
        p_a, p_b = np.zeros(3), np.array([2.0, 0.0, 0.0])
        assert np.allclose(virtual_center(p_a, p_b), [1.0, 0.0, 0.0])
        assert virtual_yaw(p_a, p_b) == pytest.approx(np.pi / 2)

    def test_yaw_along_y_wraps_to_pi(self):
        p_a, p_b = np.zeros(3), np.array([0.0, 2.0, 0.0])
        assert virtual_yaw(p_a, p_b) == pytest.approx(np.pi)

    def test_swap_shifts_yaw_by_pi(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            p_a, p_b = rng.uniform(-5, 5, 3), rng.uniform(-5, 5, 3)
            if np.linalg.norm(p_b - p_a) <= 1e-6:
                continue
            d = abs(wrap_angle(virtual_yaw(p_a, p_b) - virtual_yaw(p_b, p_a)))
            assert d == pytest.approx(np.pi, abs=1e-12)

    def test_coincident_agents_raise(self):
        p = np.array([1.0, 2.0, 3.0])
        with pytest.raises(CoincidentAgents):
            virtual_center(p, p + 1e-9)
        with pytest.raises(CoincidentAgents):
            virtual_yaw(p, p)

    def test_altitude_ignored_by_yaw(self):
        p_a, p_b = np.zeros(3), np.array([2.0, 0.0, 5.0])
        assert virtual_yaw(p_a, p_b) == pytest.approx(np.pi / 2)


class TestBaseline:
    def test_square_angle_unit_depth(self):
        assert baseline_for(np.pi / 2 - 1e-12, 1.0) == pytest.approx(2.0)

    def test_ten_degrees_at_hundred_meters(self):
        b = baseline_for(np.radians(10.0), 100.0)
        assert b == pytest.approx(200.0 * np.tan(np.radians(5.0)), abs=1e-9)
        assert b == pytest.approx(17.498, abs=1e-3)

    def test_clamp_at_small_depth(self):
        assert baseline_for(np.radians(10.0), 0.1) == 1.0

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            baseline_for(0.0, 1.0)
        with pytest.raises(ValueError):
            baseline_for(np.pi / 2, 1.0)
        with pytest.raises(ValueError):
            baseline_for(np.radians(10.0), 0.0)


class TestAgentTargets:
    def test_zero_yaw_substitution(self):
        # alpha = pi/3 at depth sqrt(3) gives baseline 2, so the pair sits
        # one meter either side of the center along the rig axis.
        d_s = np.sqrt(3.0)
        tgt = StereoTarget(np.zeros(3), 0.0, np.pi / 3.0, d_s)
        assert baseline_for(np.pi / 3.0, d_s) == pytest.approx(2.0)
        t_a, t_b = agent_targets(tgt)
        assert np.allclose(t_a.p, [0.0, -1.0, 0.0], atol=1e-12)
        assert np.allclose(t_b.p, [0.0, 1.0, 0.0], atol=1e-12)

    def test_norm_preserved_any_yaw(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            yaw = rng.uniform(-np.pi, np.pi)
            d_s = rng.uniform(1.0, 200.0)
            alpha = rng.uniform(0.01, np.pi / 2 - 0.01)
            tgt = StereoTarget(rng.uniform(-10, 10, 3), yaw, alpha, d_s)
            t_a, t_b = agent_targets(tgt)
            b = baseline_for(alpha, d_s)
            assert np.linalg.norm(t_a.p - t_b.p) == pytest.approx(b, abs=1e-9)

    def test_both_yaws_match_target(self):
        from vbslam.geom import yaw_quat
        tgt = StereoTarget(np.zeros(3), 0.7, np.radians(10.0), 50.0)
        t_a, t_b = agent_targets(tgt)
        assert np.allclose(t_a.q, yaw_quat(0.7))
        assert np.allclose(t_b.q, yaw_quat(0.7))

    def test_step_limiting(self):
        cur = np.zeros(3)
        goal = np.array([10.0, 0.0, 0.0])
        step = limit_step(cur, goal, 1.0)
        assert np.allclose(step, [1.0, 0.0, 0.0], atol=1e-12)
        near = np.array([0.4, 0.0, 0.0])
        assert np.allclose(limit_step(cur, near, 1.0), near)


class TestSceneDepth:
    def test_constant_depth(self):
        pts = np.tile([0.0, 0.0, -30.0], (25, 1))
        assert scene_depth(pts, np.zeros(3)) == pytest.approx(30.0)

    def test_bimodal_median_lands_on_majority_side(self):
        pts = np.vstack([
            np.tile([10.0, 0.0, 0.0], (60, 1)),
            np.tile([100.0, 0.0, 0.0], (40, 1)),
        ])
        assert scene_depth(pts, np.zeros(3)) == pytest.approx(10.0)

    def test_too_few_points_raises(self):
        with pytest.raises(TooFewPoints):
            scene_depth(np.ones((9, 3)), np.zeros(3))

    def test_estimator_holds_previous_value(self):
        cfg = ControllerConfig(default_depth=20.0)
        est = DepthEstimator(cfg)

        class _KF:
            def __init__(self, t, bound):
                self.t = t
                self.bound = np.asarray(bound)

        class _MP:
            def __init__(self, p):
                self.position = np.asarray(p, float)

        class _Map:
            pass

        smap = _Map()
        smap.kfs = {0: _KF(0.0, [0, 1, 2, 3, 4, 5, 6, 7, 8, 9])}
        smap.mps = {m: _MP([0.0, 0.0, -40.0]) for m in range(10)}
        assert est.update(smap, np.zeros(3)) == pytest.approx(40.0)
        smap.kfs = {0: _KF(0.0, [-1, -1])}
        assert est.update(smap, np.zeros(3)) == pytest.approx(40.0)


class TestClosedLoop:
    def test_angle_converges_within_ten_seconds(self):
        cfg = ControllerConfig(mode="adaptive", max_step=1.0)
        ctrl = FormationController(cfg)
        d_s = 80.0
        ctrl.depth_estimator.depth = d_s
        p_a = np.array([0.0, -1.0, 0.0])
        p_b = np.array([0.0, 1.0, 0.0])
        dt_tick = 1.0 / 6.0  # keyframe cadence
        t, converged_at = 0.0, None
        while t < 12.0:
            t_a, t_b = ctrl.tick(p_a, p_b)
            p_a, p_b = t_a.p, t_b.p
            t += dt_tick
            err = np.degrees(abs(ctrl.realized_angle(p_a, p_b, d_s)
                                 - cfg.alpha_t))
            if err < 1.0 and converged_at is None:
                converged_at = t
        assert converged_at is not None and converged_at <= 10.0
        # Stays converged once reached.
        assert np.degrees(abs(ctrl.realized_angle(p_a, p_b, d_s)
                              - cfg.alpha_t)) < 1.0

    def test_baseline_never_below_minimum(self):
        cfg = ControllerConfig(mode="adaptive")
        ctrl = FormationController(cfg)
        for d_s in (0.5, 1.0, 5.0, 50.0, 500.0):
            assert ctrl.baseline(d_s) >= cfg.min_baseline

    def test_fixed_mode_uses_configured_baseline(self):
        cfg = ControllerConfig(mode="fixed", fixed_baseline=2.0)
        ctrl = FormationController(cfg)
        assert ctrl.baseline(123.0) == 2.0
