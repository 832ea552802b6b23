"""Virtual-stereo formation control.

The two agents together form one wide-baseline stereo camera: a virtual
center between them, a shared yaw, and a baseline chosen so the pair
observes the scene under a desired triangulation angle.  This module
turns (current poses, scene depth) into per-agent target poses; the
runner feeds those to the platform follower.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ControllerConfig
from .geom import Pose, yaw_quat


class CoincidentAgents(RuntimeError):
    """Agents too close together to define a formation frame."""


class TooFewPoints(RuntimeError):
    """Not enough map points in view for a depth estimate."""


@dataclass
class StereoTarget:
    """Desired virtual stereo rig: center, yaw, angle, scene depth."""

    center: np.ndarray
    yaw: float
    alpha_t: float
    d_s: float

    def __post_init__(self):
        self.center = np.asarray(self.center, float)
        if not 0.0 < self.alpha_t < np.pi / 2:
            raise ValueError(f"triangulation angle {self.alpha_t} out of range")
        if self.d_s <= 0.0:
            raise ValueError(f"scene depth {self.d_s} must be positive")


def wrap_angle(a: float) -> float:
    """Wrap to the half-open interval (-pi, pi]."""
    out = float((a + np.pi) % (2.0 * np.pi) - np.pi)
    return np.pi if out == -np.pi else out


def virtual_center(p_a: np.ndarray, p_b: np.ndarray) -> np.ndarray:
    """Midpoint of the two agent positions."""
    p_a = np.asarray(p_a, float)
    p_b = np.asarray(p_b, float)
    if np.linalg.norm(p_b - p_a) <= 1e-6:
        raise CoincidentAgents("agents coincide; formation frame undefined")
    return 0.5 * (p_a + p_b)


def virtual_yaw(p_a: np.ndarray, p_b: np.ndarray) -> float:
    """Heading of the virtual rig: the baseline's ground-plane normal.

    The baseline A->B is projected onto the ground plane; the rig looks
    perpendicular to it (baseline along the rig's y axis), so the yaw is
    the projected baseline angle plus a quarter turn.
    """
    p_a = np.asarray(p_a, float)
    p_b = np.asarray(p_b, float)
    d = p_b - p_a
    if np.linalg.norm(d) <= 1e-6:
        raise CoincidentAgents("agents coincide; yaw undefined")
    return wrap_angle(np.arctan2(d[1], d[0]) + np.pi / 2)


def baseline_for(alpha_t: float, d_s: float, min_baseline: float = 1.0) -> float:
    """Baseline realizing triangulation angle alpha_t at depth d_s."""
    if not 0.0 < alpha_t < np.pi / 2:
        raise ValueError(f"triangulation angle {alpha_t} out of range")
    if d_s <= 0.0:
        raise ValueError(f"scene depth {d_s} must be positive")
    return max(2.0 * d_s * np.tan(0.5 * alpha_t), min_baseline)


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def agent_targets(target: StereoTarget,
                  min_baseline: float = 1.0) -> tuple[Pose, Pose]:
    """Per-agent target poses realizing the virtual rig.

    Agent A takes the right-camera slot (negative rig-frame y), agent B
    the left; both head along the rig yaw.
    """
    b = baseline_for(target.alpha_t, target.d_s, min_baseline)
    R = rot_z(target.yaw)
    off = R @ np.array([0.0, 0.5 * b, 0.0])
    q = yaw_quat(target.yaw)
    return (Pose(q.copy(), target.center - off),
            Pose(q.copy(), target.center + off))


def limit_step(current: np.ndarray, goal: np.ndarray,
               max_step: float = 1.0) -> np.ndarray:
    """Intermediate setpoint at most max_step along the segment to goal."""
    current = np.asarray(current, float)
    goal = np.asarray(goal, float)
    d = goal - current
    dist = np.linalg.norm(d)
    if dist <= max_step:
        return goal.copy()
    return current + d * (max_step / dist)


def scene_depth(mp_positions: np.ndarray, center: np.ndarray,
                min_points: int = 10) -> float:
    """Median distance from the virtual center to the given map points."""
    mp_positions = np.atleast_2d(np.asarray(mp_positions, float))
    if mp_positions.shape[0] < min_points or mp_positions.size == 0:
        raise TooFewPoints(f"{mp_positions.shape[0]} map points in view")
    return float(np.median(np.linalg.norm(mp_positions - center, axis=1)))


class DepthEstimator:
    """Median scene depth over the map points seen by the last two
    keyframes, holding the previous value when the view is too sparse."""

    def __init__(self, cfg: ControllerConfig):
        self.cfg = cfg
        self.depth = cfg.default_depth

    def update(self, smap, center: np.ndarray) -> float:
        recent = sorted(smap.kfs.values(), key=lambda kf: kf.t)[-2:]
        seen = set()
        for kf in recent:
            seen.update(int(m) for m in kf.bound[kf.bound >= 0])
        pos = np.array([smap.mps[m].position for m in seen if m in smap.mps])
        try:
            self.depth = scene_depth(pos if pos.size else np.empty((0, 3)),
                                     center, self.cfg.depth_min_points)
        except TooFewPoints:
            pass
        return self.depth


class FormationController:
    """KF-rate formation tick: current agent positions to target poses."""

    def __init__(self, cfg: ControllerConfig):
        self.cfg = cfg
        self.depth_estimator = DepthEstimator(cfg)

    def baseline(self, d_s: float) -> float:
        if self.cfg.mode == "fixed":
            return max(self.cfg.fixed_baseline, self.cfg.min_baseline)
        return baseline_for(self.cfg.alpha_t, d_s, self.cfg.min_baseline)

    def tick(self, p_a: np.ndarray, p_b: np.ndarray,
             smap=None) -> tuple[Pose, Pose]:
        center = virtual_center(p_a, p_b)
        yaw = virtual_yaw(p_a, p_b)
        d_s = (self.depth_estimator.update(smap, center)
               if smap is not None else self.depth_estimator.depth)
        # The target keeps the current rig center and heading and only
        # adjusts the baseline; an outer planner may move the center.
        b = self.baseline(d_s)
        alpha = 2.0 * np.arctan(0.5 * b / d_s)
        alpha = min(max(alpha, 1e-6), np.pi / 2 - 1e-9)
        goal = StereoTarget(center, yaw, alpha, d_s)
        t_a, t_b = agent_targets(goal, self.cfg.min_baseline)
        # The rig line tolerates yaw +- pi with swapped camera roles; pick
        # the branch that keeps each agent on its current side instead of
        # commanding the pair to cross through the center.
        if (t_a.p - center) @ (np.asarray(p_a, float) - center) < 0.0:
            goal = StereoTarget(center, wrap_angle(yaw + np.pi), alpha, d_s)
            t_a, t_b = agent_targets(goal, self.cfg.min_baseline)
        t_a.p = limit_step(p_a, t_a.p, self.cfg.max_step)
        t_b.p = limit_step(p_b, t_b.p, self.cfg.max_step)
        return t_a, t_b

    def realized_angle(self, p_a: np.ndarray, p_b: np.ndarray,
                       d_s: float | None = None) -> float:
        d = self.depth_estimator.depth if d_s is None else d_s
        b = float(np.linalg.norm(np.asarray(p_b, float) - np.asarray(p_a, float)))
        return 2.0 * np.arctan(0.5 * b / d)
