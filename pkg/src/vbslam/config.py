"""Plain-dataclass configuration tree with JSON round-trip."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field


@dataclass
class CameraConfig:
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 376.0
    cy: float = 240.0
    width: int = 752
    height: int = 480
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    # Sensor-to-camera transform; the default looks along -z of the sensor
    # frame (nadir for a level vehicle) with a small lever arm.
    q_CS: list = field(default_factory=lambda: [0.0, 1.0, 0.0, 0.0])
    p_CS: list = field(default_factory=lambda: [0.0, 0.0, 0.0])


@dataclass
class ImuConfig:
    rate: float = 200.0
    accel_noise: float = 0.015  # m/s^2 / sqrt(Hz)
    gyro_noise: float = 5e-4  # rad/s / sqrt(Hz)
    accel_bias_rw: float = 1e-3  # m/s^2 * sqrt(Hz) random walk drive
    gyro_bias_rw: float = 1e-5
    accel_bias_init: float = 0.0  # true initial bias magnitude per axis
    gyro_bias_init: float = 0.0


@dataclass
class VisionConfig:
    rate: float = 20.0
    pixel_noise: float = 0.5  # 1-sigma at octave 0; scales with 2^octave
    octave_max: int = 3
    descriptor_flip_prob: float = 0.02
    outlier_fraction: float = 0.0
    max_keypoints: int = 250
    max_range: float = 400.0


@dataclass
class UwbConfig:
    enabled: bool = True
    rate: float = 60.0
    sigma: float = 0.1
    antenna_a: list = field(default_factory=lambda: [0.1, 0.0, 0.0])
    antenna_b: list = field(default_factory=lambda: [0.1, 0.0, 0.0])


@dataclass
class WorldConfig:
    extent: list = field(default_factory=lambda: [-100.0, 100.0, -100.0, 100.0])
    density: float = 0.1  # landmarks per m^2
    profile: str = "flat"  # flat | hilly | canyon
    roughness: float = 0.5
    hill_amplitude: float = 3.0
    hill_scale: float = 40.0
    canyon_width: float = 30.0
    canyon_depth: float = 20.0


@dataclass
class TrackerConfig:
    sigma_grav: float = 1e-6  # gravity-rotation process noise, rad / sqrt(Hz)
    sigma_vel: float = 1e-5  # additive position process noise, m / sqrt(Hz)
    gate: float = 5.991  # chi-square(2) at 95%
    min_inliers: int = 4
    match_radius: float = 15.0
    hamming_threshold: int = 80
    keyframe_interval: float = 0.15
    max_matches: int = 120
    init_grav_sigma: float = 0.02  # rad
    init_rot_sigma: float = 0.01
    init_pos_sigma: float = 0.02
    init_vel_sigma: float = 0.05
    init_ba_sigma: float = 0.05
    init_bw_sigma: float = 0.005


@dataclass
class MapperConfig:
    mp_process_noise: float = 0.2  # m / sqrt(keyframe tick)
    budget: int = 150
    candidates: int = 3
    native_weight: float = 10.0
    # Tolerant-loss parameters, radians.
    c_t: float = 0.17453292519943295  # 10 deg
    a_t: float = 0.007615435494667714  # (5 deg)^2
    b_t: float = 0.0012184696791468343  # (2 deg)^2
    c_v: float = 0.0
    a_v: float = 0.12184696791468343  # (20 deg)^2
    b_v: float = 0.007615435494667714  # (5 deg)^2
    min_tri_angle: float = 0.008726646259971648  # 0.5 deg
    min_baseline: float = 1e-3
    reproj_gate_sigma: float = 3.0
    sampson_gate: float = 2.0
    match_radius: float = 15.0
    hamming_threshold: int = 80


@dataclass
class BackendConfig:
    horizon: float = 5.0
    gamma_p: float = 10.0
    gamma_q: float = 10.0
    eta: float = 0.5
    eta_schedule: bool = False
    eta_tau: float = 10.0
    cauchy_scale_px: float = 2.0
    cauchy_scale_range: float = 0.3
    max_lm_iters: int = 2
    lambda0: float = 1e-4
    rounds_per_kf: int = 2
    basis: str = "z"
    consensus: bool = True


@dataclass
class InitConfig:
    min_keyframes: int = 4
    target_keyframes: int = 8
    kf_interval: float = 0.3
    max_extra_keyframes: int = 8
    ransac_iters: int = 200
    sampson_thresh: float = 2.0
    min_matches: int = 30
    min_inliers: int = 20
    align_min_inliers: int = 10
    ba_iters: int = 8
    cond_threshold: float = 1e8
    min_parallax: float = 0.008726646259971648  # 0.5 deg
    match_radius: float = 40.0
    kf_rot_sigma: float = 0.01
    kf_pos_sigma: float = 0.05


@dataclass
class ControllerConfig:
    mode: str = "fixed"  # fixed | adaptive
    fixed_baseline: float = 2.0
    alpha_t: float = 0.17453292519943295  # 10 deg
    min_baseline: float = 1.0
    max_step: float = 1.0
    depth_min_points: int = 10
    default_depth: float = 20.0
    tick_dt: float = 0.2
    accel_limit: float = 2.5
    nat_freq: float = 1.2
    yaw_rate_limit: float = 0.8


@dataclass
class NetworkConfig:
    transport: str = "inproc"  # inproc | udp
    delay_ms: float = 0.0
    jitter_ms: float = 0.0
    drop_prob: float = 0.0
    reorder_prob: float = 0.0
    queue_capacity: int = 512
    udp_port_a: int = 17601
    udp_port_b: int = 17602


@dataclass
class TrajectoryConfig:
    kind: str = "circle"  # hover | circle | spiral | waypoints | formation
    center: list = field(default_factory=lambda: [0.0, 0.0])
    radius: float = 25.0
    altitude: float = 20.0
    speed: float = 4.0
    climb_rate: float = 0.0
    yaw_mode: str = "fixed"  # fixed | velocity | rate
    yaw_value: float = 0.0
    # Roll/pitch oscillation amplitude in degrees. Small attitude motion
    # mimics how a real multirotor banks while maneuvering and keeps the
    # gravity direction observable for inertial alignment; zero disables it.
    wobble_deg: float = 3.0
    baseline_dir: str = "radial"  # radial | along
    waypoints: list = field(default_factory=list)
    waypoint_times: list = field(default_factory=list)


@dataclass
class ScenarioConfig:
    name: str = "default"
    seed: int = 0
    duration: float = 30.0
    quiet_tail: float = 0.0
    mode: str = "single"  # single | duo
    time_scale: float = 1.0
    formation_baseline: float = 2.0
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    imu: ImuConfig = field(default_factory=ImuConfig)
    vision: VisionConfig = field(default_factory=VisionConfig)
    uwb: UwbConfig = field(default_factory=UwbConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    mapper: MapperConfig = field(default_factory=MapperConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    init: InitConfig = field(default_factory=InitConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)


def _from_dict(cls, data: dict):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        t = hints[f.name]
        if dataclasses.is_dataclass(t) and isinstance(value, dict):
            value = _from_dict(t, value)
        kwargs[f.name] = value
    return cls(**kwargs)


def to_json(cfg: ScenarioConfig) -> str:
    return json.dumps(dataclasses.asdict(cfg), indent=2)


def from_json(text: str) -> ScenarioConfig:
    return _from_dict(ScenarioConfig, json.loads(text))


def load(path: str) -> ScenarioConfig:
    with open(path) as fh:
        return from_json(fh.read())


def save(cfg: ScenarioConfig, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(to_json(cfg))
