"""Synthetic world, trajectories, and sensor models for two aerial agents.

World frame W: z up, gravity (0, 0, -9.81).  Sensor frame S: x forward,
y left, z up for a level vehicle; attitude is yaw about world z plus an
optional analytic roll/pitch wobble.  All trajectories expose analytically
consistent position, velocity, acceleration, and body angular rate, which is
what makes the synthesized IMU exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .camera import CameraModel
from .config import (
    CameraConfig,
    ImuConfig,
    TrajectoryConfig,
    UwbConfig,
    VisionConfig,
    WorldConfig,
)
from .geom import (
    GRAVITY,
    Pose,
    exp_map,
    gamma_jacobian,
    quat_mul,
    quat_to_rot,
    rotate,
    yaw_quat,
)

DESCRIPTOR_BYTES = 48
GRAVITY_W = np.array([0.0, 0.0, -GRAVITY])


def camera_from_config(cfg: CameraConfig) -> CameraModel:
    return CameraModel(
        fx=cfg.fx,
        fy=cfg.fy,
        cx=cfg.cx,
        cy=cfg.cy,
        width=cfg.width,
        height=cfg.height,
        k1=cfg.k1,
        k2=cfg.k2,
        p1=cfg.p1,
        p2=cfg.p2,
        T_CS=Pose(np.array(cfg.q_CS, dtype=float), np.array(cfg.p_CS, dtype=float)),
    )


class World:
    """Static landmark field with binary descriptors."""

    def __init__(self, positions: np.ndarray, descriptors: np.ndarray):
        self.positions = positions
        self.descriptors = descriptors

    @staticmethod
    def generate(cfg: WorldConfig, seed) -> "World":
        rng = np.random.default_rng(seed)
        x0, x1, y0, y1 = cfg.extent
        area = (x1 - x0) * (y1 - y0)
        n = int(round(cfg.density * area))
        xy = rng.uniform([x0, y0], [x1, y1], size=(n, 2))
        if cfg.profile == "flat":
            z = rng.uniform(0.0, cfg.roughness, size=n)
        elif cfg.profile == "hilly":
            z = (
                cfg.hill_amplitude
                * np.sin(2 * np.pi * xy[:, 0] / cfg.hill_scale)
                * np.cos(2 * np.pi * xy[:, 1] / cfg.hill_scale)
                + rng.uniform(0.0, cfg.roughness, size=n)
            )
        elif cfg.profile == "canyon":
            wall = np.abs(xy[:, 0]) > cfg.canyon_width / 2.0
            z = np.where(wall, cfg.canyon_depth, 0.0) + rng.uniform(
                0.0, cfg.roughness, size=n
            )
        else:
            raise ValueError(f"unknown profile {cfg.profile!r}")
        desc = rng.integers(0, 256, size=(n, DESCRIPTOR_BYTES), dtype=np.uint8)
        return World(np.column_stack([xy, z]), desc)

    def __len__(self) -> int:
        return self.positions.shape[0]


class Trajectory:
    """Analytic rigid-body trajectory of the sensor frame."""

    def position(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def velocity(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def acceleration(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def yaw(self, t: float) -> tuple[float, float]:
        """(psi, psi_dot)."""
        raise NotImplementedError

    def attitude(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """(q_WS, body angular rate omega_S)."""
        psi, psid = self.yaw(t)
        return yaw_quat(psi), np.array([0.0, 0.0, psid])

    def pose(self, t: float) -> Pose:
        q, _ = self.attitude(t)
        return Pose(q, self.position(t))

    def imu_true(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Ideal specific force and angular rate in the sensor frame."""
        q, omega = self.attitude(t)
        R = quat_to_rot(q)
        f = R.T @ (self.acceleration(t) - GRAVITY_W)
        return f, omega


class Hover(Trajectory):
    def __init__(self, p0, yaw: float = 0.0):
        self.p0 = np.asarray(p0, dtype=float)
        self._yaw = yaw

    def position(self, t):
        return self.p0.copy()

    def velocity(self, t):
        return np.zeros(3)

    def acceleration(self, t):
        return np.zeros(3)

    def yaw(self, t):
        return self._yaw, 0.0


class Circle(Trajectory):
    """Constant-rate circle at fixed altitude, optionally facing velocity."""

    def __init__(self, center, radius, omega, altitude, phase=0.0, yaw_mode="velocity"):
        self.c = np.asarray(center, dtype=float)
        self.r = float(radius)
        self.w = float(omega)
        self.z = float(altitude)
        self.phase = float(phase)
        self.yaw_mode = yaw_mode

    def position(self, t):
        a = self.w * t + self.phase
        return np.array(
            [self.c[0] + self.r * np.cos(a), self.c[1] + self.r * np.sin(a), self.z]
        )

    def velocity(self, t):
        a = self.w * t + self.phase
        return self.r * self.w * np.array([-np.sin(a), np.cos(a), 0.0])

    def acceleration(self, t):
        a = self.w * t + self.phase
        return -self.r * self.w**2 * np.array([np.cos(a), np.sin(a), 0.0])

    def yaw(self, t):
        if self.yaw_mode == "velocity":
            a = self.w * t + self.phase
            # atan2(cos a, -sin a) = a + pi/2 up to wrapping.
            return np.arctan2(np.cos(a), -np.sin(a)), self.w
        return 0.0, 0.0


class Spiral(Trajectory):
    """Circle with constant climb; exact closed form."""

    def __init__(self, center, radius, omega, z0, climb_rate, phase=0.0, yaw_mode="velocity"):
        self.c = np.asarray(center, dtype=float)
        self.r = float(radius)
        self.w = float(omega)
        self.z0 = float(z0)
        self.cr = float(climb_rate)
        self.phase = float(phase)
        self.yaw_mode = yaw_mode

    def position(self, t):
        a = self.w * t + self.phase
        return np.array(
            [
                self.c[0] + self.r * np.cos(a),
                self.c[1] + self.r * np.sin(a),
                self.z0 + self.cr * t,
            ]
        )

    def velocity(self, t):
        a = self.w * t + self.phase
        return np.array(
            [-self.r * self.w * np.sin(a), self.r * self.w * np.cos(a), self.cr]
        )

    def acceleration(self, t):
        a = self.w * t + self.phase
        return np.array(
            [-self.r * self.w**2 * np.cos(a), -self.r * self.w**2 * np.sin(a), 0.0]
        )

    def yaw(self, t):
        if self.yaw_mode == "velocity":
            a = self.w * t + self.phase
            return np.arctan2(np.cos(a), -np.sin(a)), self.w
        return 0.0, 0.0


class WaypointTrajectory(Trajectory):
    """Cubic-spline path through timed waypoints."""

    def __init__(self, times, points, yaw_mode="fixed", yaw_value=0.0, periodic=False):
        times = np.asarray(times, dtype=float)
        points = np.asarray(points, dtype=float)
        bc = "periodic" if periodic else "natural"
        self.spline = CubicSpline(times, points, axis=0, bc_type=bc)
        self.dspline = self.spline.derivative()
        self.ddspline = self.spline.derivative(2)
        self.t0, self.t1 = float(times[0]), float(times[-1])
        self.yaw_mode = yaw_mode
        self.yaw_value = yaw_value

    def _clamp(self, t):
        return min(max(t, self.t0), self.t1)

    def position(self, t):
        return np.asarray(self.spline(self._clamp(t)))

    def velocity(self, t):
        return np.asarray(self.dspline(self._clamp(t)))

    def acceleration(self, t):
        return np.asarray(self.ddspline(self._clamp(t)))

    def yaw(self, t):
        if self.yaw_mode == "velocity":
            v = self.velocity(t)
            a = self.acceleration(t)
            s2 = v[0] ** 2 + v[1] ** 2
            if s2 < 1e-9:
                return self.yaw_value, 0.0
            return np.arctan2(v[1], v[0]), (v[0] * a[1] - v[1] * a[0]) / s2
        return self.yaw_value, 0.0


class Wobble(Trajectory):
    """Adds an analytic sinusoidal roll/pitch oscillation to a base trajectory."""

    def __init__(self, base: Trajectory, roll_amp=0.05, pitch_amp=0.04, w1=1.3, w2=0.9):
        self.base = base
        self.ra, self.pa = roll_amp, pitch_amp
        self.w1, self.w2 = w1, w2

    def position(self, t):
        return self.base.position(t)

    def velocity(self, t):
        return self.base.velocity(t)

    def acceleration(self, t):
        return self.base.acceleration(t)

    def yaw(self, t):
        return self.base.yaw(t)

    def attitude(self, t):
        psi, psid = self.base.yaw(t)
        phi = np.array(
            [self.ra * np.sin(self.w1 * t), self.pa * np.cos(self.w2 * t), 0.0]
        )
        phid = np.array(
            [
                self.ra * self.w1 * np.cos(self.w1 * t),
                -self.pa * self.w2 * np.sin(self.w2 * t),
                0.0,
            ]
        )
        q_rp = exp_map(phi)
        q = quat_mul(yaw_quat(psi), q_rp)
        omega = quat_to_rot(q_rp).T @ np.array([0.0, 0.0, psid]) + gamma_jacobian(
            phi
        ) @ phid
        return q, omega


class RecordedTrajectory(Trajectory):
    """Trajectory backed by uniformly sampled state arrays (closed-loop runs).

    Samples exactly on the grid are returned exactly; in-between queries are
    interpolated linearly, which is adequate for range synthesis.
    """

    def __init__(self, dt: float):
        self.dt = dt
        self.p: list[np.ndarray] = []
        self.v: list[np.ndarray] = []
        self.a: list[np.ndarray] = []
        self.q: list[np.ndarray] = []
        self.omega: list[np.ndarray] = []

    def append(self, p, v, a, q, omega):
        self.p.append(np.array(p))
        self.v.append(np.array(v))
        self.a.append(np.array(a))
        self.q.append(np.array(q))
        self.omega.append(np.array(omega))

    def _index(self, t: float) -> tuple[int, float]:
        s = t / self.dt
        i = int(np.floor(s + 1e-9))
        i = min(max(i, 0), len(self.p) - 1)
        return i, s - i

    def _lerp(self, arr, t):
        i, frac = self._index(t)
        if frac <= 1e-9 or i + 1 >= len(arr):
            return arr[i].copy()
        return (1.0 - frac) * arr[i] + frac * arr[i + 1]

    def position(self, t):
        return self._lerp(self.p, t)

    def velocity(self, t):
        return self._lerp(self.v, t)

    def acceleration(self, t):
        i, _ = self._index(t)
        return self.a[i].copy()

    def yaw(self, t):
        raise NotImplementedError("recorded trajectories store attitude directly")

    def attitude(self, t):
        i, _ = self._index(t)
        return self.q[i].copy(), self.omega[i].copy()


class KinematicFollower:
    """Critically damped second-order follower used for closed-loop scenarios.

    Acceleration is piecewise constant over IMU steps, so the recorded
    position/velocity/acceleration triple stays exactly consistent.
    """

    def __init__(self, p0, yaw0, dt, accel_limit=2.5, nat_freq=1.2, yaw_rate_limit=0.8):
        self.p = np.asarray(p0, dtype=float).copy()
        self.v = np.zeros(3)
        self.psi = float(yaw0)
        self.dt = dt
        self.accel_limit = accel_limit
        self.wn = nat_freq
        self.yaw_rate_limit = yaw_rate_limit
        self.target_p = self.p.copy()
        self.target_psi = self.psi
        self.record = RecordedTrajectory(dt)

    def set_target(self, p, psi=None):
        self.target_p = np.asarray(p, dtype=float).copy()
        if psi is not None:
            self.target_psi = float(psi)

    def step(self):
        a = self.wn**2 * (self.target_p - self.p) - 2.0 * self.wn * self.v
        norm = np.linalg.norm(a)
        if norm > self.accel_limit:
            a = a * (self.accel_limit / norm)
        dpsi = np.arctan2(
            np.sin(self.target_psi - self.psi), np.cos(self.target_psi - self.psi)
        )
        rate = np.clip(dpsi / self.dt, -self.yaw_rate_limit, self.yaw_rate_limit)
        self.record.append(self.p, self.v, a, yaw_quat(self.psi), [0.0, 0.0, rate])
        self.p = self.p + self.v * self.dt + 0.5 * a * self.dt**2
        self.v = self.v + a * self.dt
        self.psi = self.psi + rate * self.dt


class ImuSim:
    """Accelerometer and gyro with white noise and bias random walks."""

    def __init__(self, cfg: ImuConfig, seed):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.dt = 1.0 / cfg.rate
        sign = self.rng.choice([-1.0, 1.0], size=6)
        self.b_a = cfg.accel_bias_init * sign[:3]
        self.b_w = cfg.gyro_bias_init * sign[3:]

    def sample(self, traj: Trajectory, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Measured (accel, gyro) at time t; advances the bias walks."""
        f, omega = traj.imu_true(t)
        sdt = np.sqrt(self.dt)
        accel = f + self.b_a + self.cfg.accel_noise / sdt * self.rng.standard_normal(3)
        gyro = omega + self.b_w + self.cfg.gyro_noise / sdt * self.rng.standard_normal(3)
        self.b_a = self.b_a + self.cfg.accel_bias_rw * sdt * self.rng.standard_normal(3)
        self.b_w = self.b_w + self.cfg.gyro_bias_rw * sdt * self.rng.standard_normal(3)
        return accel, gyro


@dataclass
class Frame:
    """Keypoints detected in one image."""

    t: float
    uv: np.ndarray  # (K, 2)
    octave: np.ndarray  # (K,) uint8
    desc: np.ndarray  # (K, DESCRIPTOR_BYTES) uint8
    truth_id: np.ndarray  # (K,) int64, -1 for outliers (simulation-only)

    def __len__(self) -> int:
        return self.uv.shape[0]


def observe_frame(
    world: World,
    cam: CameraModel,
    T_WS: Pose,
    t: float,
    rng: np.random.Generator,
    cfg: VisionConfig,
) -> Frame:
    """Synthesize one frame of keypoint observations."""
    T_CW = cam.T_CS @ T_WS.inverse()
    R = quat_to_rot(T_CW.q)
    m_C = world.positions @ R.T + T_CW.p
    uv, valid = cam.project_many(m_C)
    rel = world.positions - T_WS.p
    valid &= np.einsum("ij,ij->i", rel, rel) < cfg.max_range**2
    idx = np.flatnonzero(valid)
    if idx.size > cfg.max_keypoints:
        idx = rng.choice(idx, size=cfg.max_keypoints, replace=False)
        idx.sort()

    k = idx.size
    octave = rng.integers(0, cfg.octave_max + 1, size=k).astype(np.uint8)
    noise = rng.standard_normal((k, 2)) * (cfg.pixel_noise * 2.0**octave)[:, None]
    pix = uv[idx] + noise
    desc = world.descriptors[idx].copy()
    if cfg.descriptor_flip_prob > 0.0 and k:
        flips = rng.random((k, DESCRIPTOR_BYTES * 8)) < cfg.descriptor_flip_prob
        desc ^= np.packbits(flips, axis=1)
    truth = idx.astype(np.int64)

    if cfg.outlier_fraction > 0.0 and k:
        bad = rng.random(k) < cfg.outlier_fraction
        nbad = int(bad.sum())
        if nbad:
            pix[bad, 0] = rng.uniform(0.0, cam.width - 1.0, size=nbad)
            pix[bad, 1] = rng.uniform(0.0, cam.height - 1.0, size=nbad)
            desc[bad] = rng.integers(0, 256, size=(nbad, DESCRIPTOR_BYTES), dtype=np.uint8)
            truth[bad] = -1

    inside = (
        (pix[:, 0] >= 0.0)
        & (pix[:, 0] <= cam.width - 1.0)
        & (pix[:, 1] >= 0.0)
        & (pix[:, 1] <= cam.height - 1.0)
    )
    return Frame(t, pix[inside], octave[inside], desc[inside], truth[inside])


def uwb_range(
    traj_a: Trajectory,
    traj_b: Trajectory,
    t: float,
    cfg: UwbConfig,
    rng: np.random.Generator | None = None,
) -> float:
    """Measured antenna-to-antenna range at time t."""
    pa = traj_a.pose(t).apply(np.array(cfg.antenna_a))
    pb = traj_b.pose(t).apply(np.array(cfg.antenna_b))
    d = float(np.linalg.norm(pa - pb))
    if rng is not None and cfg.sigma > 0.0:
        d += cfg.sigma * float(rng.standard_normal())
    return d


def formation_offsets(traj_cfg: TrajectoryConfig, baseline: float):
    """Symmetric per-agent offsets realizing the requested formation baseline."""
    half = baseline / 2.0
    if traj_cfg.kind in ("circle", "spiral") and traj_cfg.baseline_dir == "radial":
        return -half, +half  # radius offsets
    return -half, +half


def _excite(traj: Trajectory, traj_cfg: TrajectoryConfig) -> Trajectory:
    """Overlay the configured roll/pitch oscillation on a base trajectory."""
    if traj_cfg.wobble_deg <= 0.0:
        return traj
    amp = np.radians(traj_cfg.wobble_deg)
    return Wobble(traj, roll_amp=amp, pitch_amp=0.8 * amp)


def build_trajectories(
    traj_cfg: TrajectoryConfig, baseline: float
) -> tuple[Trajectory, Trajectory]:
    """Open-loop truth for agents A and B separated by the formation baseline."""
    off_a, off_b = formation_offsets(traj_cfg, baseline)
    if traj_cfg.kind == "hover":
        z = traj_cfg.altitude
        c = traj_cfg.center
        pair = (
            Hover([c[0] + off_a, c[1], z], traj_cfg.yaw_value),
            Hover([c[0] + off_b, c[1], z], traj_cfg.yaw_value),
        )
    elif traj_cfg.kind == "circle":
        omega = traj_cfg.speed / traj_cfg.radius
        pair = (
            Circle(traj_cfg.center, traj_cfg.radius + off_a, omega, traj_cfg.altitude,
                   yaw_mode=traj_cfg.yaw_mode),
            Circle(traj_cfg.center, traj_cfg.radius + off_b, omega, traj_cfg.altitude,
                   yaw_mode=traj_cfg.yaw_mode),
        )
    elif traj_cfg.kind == "spiral":
        omega = traj_cfg.speed / traj_cfg.radius
        pair = (
            Spiral(traj_cfg.center, traj_cfg.radius + off_a, omega, traj_cfg.altitude,
                   traj_cfg.climb_rate, yaw_mode=traj_cfg.yaw_mode),
            Spiral(traj_cfg.center, traj_cfg.radius + off_b, omega, traj_cfg.altitude,
                   traj_cfg.climb_rate, yaw_mode=traj_cfg.yaw_mode),
        )
    elif traj_cfg.kind == "waypoints":
        pts = np.asarray(traj_cfg.waypoints, dtype=float)
        times = np.asarray(traj_cfg.waypoint_times, dtype=float)
        base_a = pts + np.array([0.0, off_a, 0.0])
        base_b = pts + np.array([0.0, off_b, 0.0])
        pair = (
            WaypointTrajectory(times, base_a, traj_cfg.yaw_mode, traj_cfg.yaw_value),
            WaypointTrajectory(times, base_b, traj_cfg.yaw_mode, traj_cfg.yaw_value),
        )
    else:
        raise ValueError(f"unknown trajectory kind {traj_cfg.kind!r}")
    return _excite(pair[0], traj_cfg), _excite(pair[1], traj_cfg)
