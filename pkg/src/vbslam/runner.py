"""Two-agent orchestration: initialization handoff, steady-state
tracking/mapping/optimization, deterministic offline simulation, threaded
realtime execution, and artifact writing.
"""

from __future__ import annotations

import heapq
import itertools
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import comms
from .backend import (
    RangeMeasurement,
    apply_window,
    build_problem,
    build_window,
    jacobian_sparsity_report,
    prune_map,
    solve_local,
)
from .bootstrap import (
    AlignmentFailed,
    ExcitationTooLow,
    InitSession,
    adopt_bundle,
)
from .camera import CameraModel
from .config import ScenarioConfig
from .consensus import ConsensusState
from .controller import (
    StereoTarget,
    agent_targets,
    baseline_for,
    DepthEstimator,
    limit_step,
    TooFewPoints,
)
from .geom import Pose, boxminus, quat_to_rot
from .mapper import Keyframe, MapPoint, SlamMap, process_keyframe
from .metrics import (
    associate,
    align_trajectories,
    write_metrics_json,
)
from .simworld import (
    Frame,
    ImuSim,
    KinematicFollower,
    Spiral,
    Circle,
    WaypointTrajectory,
    World,
    build_trajectories,
    camera_from_config,
    observe_frame,
    uwb_range,
)
from .tracker import (
    TrackingLost,
    make_state,
    process_noise,
    propagate,
    should_create_keyframe,
    update as tracker_update,
)

# Initialization frames travel tagged with this bit so they are never
# mistaken for map keyframes on the receiving side.
INIT_FRAME_BIT = 1 << 63

MAX_LOST_STREAK = 40
IMU_BUFFER_SPAN = 30.0


class InitFailed(RuntimeError):
    """Initialization did not complete within the scenario."""


class AgentCrashed(RuntimeError):
    """An agent lost tracking beyond recovery."""


def estimator_sigma_px(cfg: ScenarioConfig) -> float:
    """Observation sigma used by the estimators; floored for zero-noise runs."""
    return max(cfg.vision.pixel_noise, 0.05)


def estimator_sigma_range(cfg: ScenarioConfig) -> float:
    return max(cfg.uwb.sigma, 0.02)


@dataclass
class TrajRow:
    t: float
    pose: Pose


class Agent:
    """One estimator instance: tracker, map, backend, and consensus.

    The methods are synchronous building blocks; the offline runner calls
    them inline while the threaded runner wires queues around them.
    """

    def __init__(self, agent_id: int, cfg: ScenarioConfig, cam: CameraModel,
                 send_fn, bandwidth: comms.BandwidthMonitor | None = None):
        self.id = agent_id
        self.cfg = cfg
        self.cam = cam
        self.send_fn = send_fn
        self.bandwidth = bandwidth
        self.sigma_px = estimator_sigma_px(cfg)
        self.sigma_rng = estimator_sigma_range(cfg)

        self.state = None
        self.smap: SlamMap | None = None
        self.snapshot = None
        self.consensus = ConsensusState(cfg.backend)
        self.kf_counter = 0
        self.t_last_kf = -np.inf
        self.steady = False

        self.imu_buf: deque = deque()
        self.range_buf: deque = deque()
        self.traj_rows: list[TrajRow] = []
        self.kf_final: dict[int, tuple] = {}
        self.timers: dict[str, list] = defaultdict(list)
        self.admm_rounds = 0
        self.kf_events = 0
        self.n_native_kfs = 0
        self.lost_streak = 0
        self.lost_total = 0
        self.init_digest: str | None = None

    # -- plumbing ------------------------------------------------------------

    def _send(self, t: float, msg_type: int, data: bytes) -> None:
        if self.bandwidth is not None:
            self.bandwidth.record(t, self.id, msg_type, len(data))
        self.send_fn(data, t)

    def _refresh_snapshot(self) -> None:
        self.snapshot = self.smap.snapshot()

    def _next_kf_id(self) -> int:
        kf_id = (self.id << 56) | self.kf_counter
        self.kf_counter += 1
        return kf_id

    # -- sensors ------------------------------------------------------------

    def handle_imu(self, t: float, accel: np.ndarray, gyro: np.ndarray) -> None:
        self.imu_buf.append((t, accel, gyro))
        while self.imu_buf and self.imu_buf[0][0] < t - IMU_BUFFER_SPAN:
            self.imu_buf.popleft()
        if not self.steady:
            return
        dt = t - self.state.t
        if dt <= 1e-12:
            return
        W = process_noise(self.cfg.tracker, self.cfg.imu, dt)
        self.state = propagate(self.state, accel, gyro, dt, W)

    def handle_range(self, t: float, d: float) -> None:
        self.range_buf.append(RangeMeasurement(
            t=t, d=d, sigma=self.sigma_rng,
            antenna_a=np.asarray(self.cfg.uwb.antenna_a, float),
            antenna_b=np.asarray(self.cfg.uwb.antenna_b, float)))

    def handle_frame(self, frame: Frame) -> tuple[Keyframe, tuple] | None:
        """Track one frame; returns a new native keyframe when due."""
        t0 = time.perf_counter()
        try:
            self.state, result = tracker_update(
                self.state, self.snapshot, frame, self.cam,
                self.cfg.tracker, self.sigma_px)
        except TrackingLost:
            self.lost_streak += 1
            self.lost_total += 1
            self.timers["tracking"].append(time.perf_counter() - t0)
            if self.lost_streak > MAX_LOST_STREAK:
                raise AgentCrashed(
                    f"agent {self.id}: lost tracking for "
                    f"{self.lost_streak} consecutive frames at t={frame.t:.2f}")
            return None
        self.timers["tracking"].append(time.perf_counter() - t0)
        self.lost_streak = 0
        self.traj_rows.append(TrajRow(frame.t, result.pose))

        if not should_create_keyframe(frame.t, self.t_last_kf,
                                      self.cfg.tracker.keyframe_interval):
            return None
        self.t_last_kf = frame.t
        kf = Keyframe(
            kf_id=self._next_kf_id(), agent=self.id, t=frame.t,
            uv=frame.uv.copy(), octave=frame.octave.copy(),
            desc=frame.desc.copy(), pose=result.pose.copy(),
            cov6=result.cov6.copy(), native=True,
            truth_id=frame.truth_id.copy())
        return kf, (result.mp_ids, result.kp_idx)

    # -- mapping and optimization --------------------------------------------

    def _scene_depth_guess(self) -> float:
        kfs = self.smap.keyframes_by_time()
        if not kfs:
            return self.cfg.controller.default_depth
        kf = kfs[-1]
        bound = kf.bound[kf.bound >= 0]
        pts = [self.smap.mps[int(b)].position for b in bound
               if int(b) in self.smap.mps]
        if len(pts) < 5:
            return self.cfg.controller.default_depth
        d = np.linalg.norm(np.array(pts) - kf.pose.p[None, :], axis=1)
        return float(np.median(d))

    def mapper_native(self, kf: Keyframe, matches: tuple) -> None:
        t0 = time.perf_counter()
        process_keyframe(self.smap, kf, self.cam, self.cfg.mapper,
                         self.sigma_px, tracker_matches=matches,
                         scene_depth=self._scene_depth_guess())
        self.consensus.register_kf(kf.kf_id, kf.ref_pose, kf.t)
        self.n_native_kfs += 1
        self._refresh_snapshot()
        self.timers["mapping"].append(time.perf_counter() - t0)

    def keyframe_msg(self, kf: Keyframe) -> comms.KeyframeMsg:
        return comms.KeyframeMsg(
            agent_id=self.id, kf_id=kf.kf_id, t_ns=int(round(kf.t * 1e9)),
            q=kf.ref_pose.q.copy(), p=kf.ref_pose.p.copy(),
            cov6=kf.cov6.copy(), uv=kf.uv.astype(np.float32),
            octave=kf.octave.astype(np.uint8), desc=kf.desc.astype(np.uint8))

    def on_keyframe_msg(self, msg: comms.KeyframeMsg, t_now: float) -> bool:
        """Adopt a remote keyframe; returns False for stale init frames."""
        if msg.kf_id & INIT_FRAME_BIT:
            return False
        if self.smap is None or msg.kf_id in self.smap.kfs:
            return False
        t0 = time.perf_counter()
        pose = Pose(msg.q.copy(), msg.p.copy())
        kf = Keyframe(
            kf_id=msg.kf_id, agent=msg.agent_id, t=msg.t_ns * 1e-9,
            uv=msg.uv.astype(float), octave=msg.octave.copy(),
            desc=msg.desc.copy(), pose=pose, cov6=msg.cov6.copy(),
            native=False)
        process_keyframe(self.smap, kf, self.cam, self.cfg.mapper,
                         self.sigma_px, tracker_matches=None,
                         scene_depth=self._scene_depth_guess())
        self.consensus.register_kf(kf.kf_id, kf.ref_pose, kf.t)
        self._refresh_snapshot()
        self.timers["mapping"].append(time.perf_counter() - t0)
        return True

    def on_dual_msg(self, msg: comms.DualMsg, t_now: float) -> None:
        self.consensus.ingest_remote(msg.entries, t_now)

    def _window_ranges(self, t_start: float) -> list[RangeMeasurement]:
        """In-window ranges thinned to keyframe cadence.

        The radio samples far faster than the keyframe rate; one range per
        keyframe interval carries the same scale information at a fraction
        of the solve cost (the tracker still consumes the full rate).
        """
        if not self.cfg.uwb.enabled:
            return []
        min_gap = self.cfg.tracker.keyframe_interval * 0.999
        out: list[RangeMeasurement] = []
        t_last = -np.inf
        for m in self.range_buf:
            if m.t >= t_start and m.t - t_last >= min_gap:
                out.append(m)
                t_last = m.t
        return out

    def backend_rounds(self, t_now: float) -> None:
        bcfg = self.cfg.backend
        self.kf_events += 1
        entries = []
        for _ in range(bcfg.rounds_per_kf):
            t0 = time.perf_counter()
            fixed = ()
            if not bcfg.consensus:
                kfs = self.smap.keyframes_by_time()
                if kfs:
                    fixed = (min(kfs, key=lambda k: (k.t, k.kf_id)).kf_id,)
            win = build_window(self.smap, self.sigma_px, bcfg.horizon,
                               t_now=t_now, fixed_ids=fixed)
            if not win.kfs:
                return
            t_start = min(k.t for k in win.kfs)
            problem = build_problem(win, self.consensus.dual_map(), bcfg,
                                    self.cam, self._window_ranges(t_start))
            solve_local(problem)
            apply_window(self.smap, win)
            poses = {k.kf_id: k.pose for k in win.kfs}
            entries = self.consensus.dual_update(poses)
            self.admm_rounds += 1
            self.timers["backend"].append(time.perf_counter() - t0)
        if entries and bcfg.consensus:
            msg = comms.DualMsg(self.id, entries)
            self._send(t_now, comms.MSG_DUAL, msg.to_bytes())
        self._refresh_snapshot()

    def record_and_prune(self, t_now: float) -> None:
        """Capture final pose estimates of keyframes leaving the window."""
        horizon = self.cfg.backend.horizon
        for kf_id, kf in list(self.smap.kfs.items()):
            if kf.t < t_now - horizon - 1e-9:
                self.kf_final[kf_id] = (kf.t, kf.pose.copy())
        prune_map(self.smap, horizon, t_now=t_now)
        self.consensus.keep_only(self.smap.kfs.keys())
        while (self.range_buf
               and self.range_buf[0].t < t_now - horizon - 1.0):
            self.range_buf.popleft()
        self._refresh_snapshot()

    def flush_final(self) -> None:
        for kf_id, kf in self.smap.kfs.items():
            self.kf_final[kf_id] = (kf.t, kf.pose.copy())

    # -- initialization adoption ----------------------------------------------

    def start_steady(self, smap: SlamMap, q_wm: np.ndarray, v_s: np.ndarray,
                     b_w: np.ndarray, kf_counter: int, t_now: float) -> None:
        """Install the shared init map and catch the tracker up to now."""
        self.smap = smap
        self.kf_counter = kf_counter
        own = smap.keyframes_by_time(self.id)
        last = own[-1]
        self.state = make_state(
            self.cfg.tracker, q_wm=q_wm, q_ms=last.pose.q, p_ms=last.pose.p,
            v_s=v_s, b_a=np.zeros(3), b_w=b_w, t=last.t)
        for kf in smap.keyframes_by_time():
            kf.ref_pose = kf.pose.copy()
            self.consensus.register_kf(kf.kf_id, kf.ref_pose, kf.t)
        self.t_last_kf = last.t
        self.steady = True
        self._refresh_snapshot()
        for t, accel, gyro in list(self.imu_buf):
            if t <= self.state.t + 1e-12:
                continue
            dt = t - self.state.t
            W = process_noise(self.cfg.tracker, self.cfg.imu, dt)
            self.state = propagate(self.state, accel, gyro, dt, W)
        assert abs(self.state.t - t_now) < 1.0 or not self.imu_buf


def _timing_summary(timers: dict) -> dict:
    out = {}
    for stage, vals in sorted(timers.items()):
        arr = np.asarray(vals)
        if arr.size == 0:
            continue
        out[stage] = {
            "count": int(arr.size),
            "mean_ms": float(arr.mean() * 1e3),
            "std_ms": float(arr.std() * 1e3),
            "max_ms": float(arr.max() * 1e3),
        }
    return out


def timing_report(agents: list[Agent], budget_ms: float = 25.0) -> dict:
    """Per-stage wall-clock statistics with the tracking budget called out."""
    report = {}
    for agent in agents:
        stats = _timing_summary(agent.timers)
        track = stats.get("tracking")
        if track is not None:
            track["budget_ms"] = budget_ms
            track["within_budget"] = bool(track["mean_ms"] < budget_ms)
        report[f"agent_{agent.id}"] = stats
    return report


# ---------------------------------------------------------------------------
# Closed-loop formation support
# ---------------------------------------------------------------------------


class FormationPlanner:
    """Targets both agents around a moving virtual-rig center.

    The center follows a reference path in the world frame; the baseline
    magnitude comes from the controller config, using the estimated scene
    depth when the mode is adaptive.
    """

    def __init__(self, path, cfg: ScenarioConfig):
        self.path = path
        self.cfg = cfg.controller
        self.depth_est = DepthEstimator(cfg.controller)

    def update_depth(self, smap: SlamMap | None) -> float:
        if smap is None or not smap.kfs:
            return self.depth_est.depth
        own = smap.keyframes_by_time(smap.agent)
        other = smap.keyframes_by_time(1 - smap.agent)
        if own and other:
            center = 0.5 * (own[-1].pose.p + other[-1].pose.p)
        elif own:
            center = own[-1].pose.p
        else:
            return self.depth_est.depth
        try:
            self.depth_est.update(smap, center)
        except TooFewPoints:
            pass
        return self.depth_est.depth

    def baseline(self, d_s: float, steady: bool) -> float:
        if self.cfg.mode == "adaptive" and steady:
            return baseline_for(self.cfg.alpha_t, d_s, self.cfg.min_baseline)
        return max(self.cfg.fixed_baseline, self.cfg.min_baseline)

    def targets(self, t: float, p_a, p_b, smap, steady: bool):
        center = self.path.position(t)
        yaw = self.path.yaw(t)[0]
        d_s = self.update_depth(smap if steady else None)
        b = self.baseline(d_s, steady)
        alpha = 2.0 * np.arctan(0.5 * b / max(d_s, 1e-6))
        alpha = min(max(alpha, 1e-6), np.pi / 2 - 1e-9)
        goal = StereoTarget(center, yaw, alpha, max(d_s, 1e-3))
        t_a, t_b = agent_targets(goal, self.cfg.min_baseline)
        t_a.p = limit_step(p_a, t_a.p, self.cfg.max_step)
        t_b.p = limit_step(p_b, t_b.p, self.cfg.max_step)
        return t_a, t_b, yaw


def _formation_center_path(cfg: ScenarioConfig):
    tr = cfg.trajectory
    if tr.waypoints:
        return WaypointTrajectory(tr.waypoint_times, tr.waypoints,
                                  yaw_mode=tr.yaw_mode, yaw_value=tr.yaw_value)
    omega = tr.speed / tr.radius
    if tr.climb_rate:
        return Spiral(tr.center, tr.radius, omega, tr.altitude, tr.climb_rate,
                      yaw_mode=tr.yaw_mode)
    return Circle(tr.center, tr.radius, omega, tr.altitude,
                  yaw_mode=tr.yaw_mode)


# ---------------------------------------------------------------------------
# Deterministic offline runner (single process, virtual clock)
# ---------------------------------------------------------------------------

# Event priorities: world tick, imu, frame, range, network, controller.
PRIO_TICK, PRIO_IMU, PRIO_FRAME, PRIO_RANGE, PRIO_NET, PRIO_CTRL = range(6)


@dataclass
class RunReport:
    out_dir: str
    metrics: dict
    agents: list = field(default_factory=list)


class OfflineRunner:
    """Both agents in one process on a shared virtual clock.

    Every random stream is derived from the scenario seed, network delay is
    injected by the link policies, and events at equal times are ordered by
    a fixed priority plus a monotone sequence number, so two runs with the
    same config and seed produce byte-identical artifacts.
    """

    def __init__(self, cfg: ScenarioConfig, out_dir: str | Path):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)

        ss = np.random.SeedSequence(cfg.seed)
        kids = ss.spawn(10)
        self.world = World.generate(cfg.world, kids[0])
        self.cam = camera_from_config(cfg.camera)
        self.imu_sim = {0: ImuSim(cfg.imu, kids[1]), 1: ImuSim(cfg.imu, kids[2])}
        self.vis_rng = {0: np.random.default_rng(kids[3]),
                        1: np.random.default_rng(kids[4])}
        self.uwb_rng = np.random.default_rng(kids[5])
        policy = comms.LinkPolicy(
            delay_ms=cfg.network.delay_ms, jitter_ms=cfg.network.jitter_ms,
            drop_prob=cfg.network.drop_prob,
            reorder_prob=cfg.network.reorder_prob)
        self.links = {0: comms.SimLink(policy, np.random.default_rng(kids[6])),
                      1: comms.SimLink(policy, np.random.default_rng(kids[7]))}
        self.bandwidth = comms.BandwidthMonitor()

        self.agents = {
            a: Agent(a, cfg, self.cam,
                     send_fn=self._sender(a), bandwidth=self.bandwidth)
            for a in (0, 1)
        }

        self.closed_loop = cfg.trajectory.kind == "formation"
        if self.closed_loop:
            self.planner = FormationPlanner(_formation_center_path(cfg), cfg)
            dt = 1.0 / cfg.imu.rate
            b0 = max(cfg.controller.fixed_baseline, cfg.controller.min_baseline)
            c0 = self.planner.path.position(0.0)
            yaw0 = self.planner.path.yaw(0.0)[0]
            goal = StereoTarget(c0, yaw0, 2.0 * np.arctan(0.5 * b0 / 20.0), 20.0)
            t_a, t_b = agent_targets(goal, cfg.controller.min_baseline)
            self.followers = {
                0: KinematicFollower(t_a.p, yaw0, dt,
                                     cfg.controller.accel_limit,
                                     cfg.controller.nat_freq,
                                     cfg.controller.yaw_rate_limit),
                1: KinematicFollower(t_b.p, yaw0, dt,
                                     cfg.controller.accel_limit,
                                     cfg.controller.nat_freq,
                                     cfg.controller.yaw_rate_limit),
            }
            self.truth = {a: self.followers[a].record for a in (0, 1)}
        else:
            ta, tb = build_trajectories(cfg.trajectory, cfg.formation_baseline)
            self.truth = {0: ta, 1: tb}

        sess_seed = int(kids[8].generate_state(1)[0])
        self.session = InitSession(
            cam=self.cam, cfg=cfg.init, mapper_cfg=cfg.mapper,
            sigma_px=estimator_sigma_px(cfg), seed=sess_seed)
        self.init_pending_a: dict[int, Frame] = {}
        self.init_last_sent_b = -np.inf
        self.init_last_imu_sent = -np.inf
        self.init_frames_sent_b = 0
        self.init_done = False
        self.init_info: dict = {"resets": 0}

        self._heap: list = []
        self._seq = itertools.count()
        self.gt_rows = {0: [], 1: []}
        self._t_end = cfg.duration

    # -- event machinery -----------------------------------------------------

    def _push(self, t: float, prio: int, kind: str, data) -> None:
        heapq.heappush(self._heap, (t, prio, next(self._seq), kind, data))

    def _sender(self, src: int):
        link = None

        def send(data: bytes, t_now: float):
            for deliver_t, _, buf in self.links[src].send(data, t_now):
                self._push(deliver_t, PRIO_NET, "net", (1 - src, buf))

        return send

    # -- sensor synthesis -----------------------------------------------------

    def _frame(self, agent: int, t: float) -> Frame:
        pose = self.truth[agent].pose(t)
        return observe_frame(self.world, self.cam, pose, t,
                             self.vis_rng[agent], self.cfg.vision)

    # -- init phase ------------------------------------------------------------

    def _init_on_frame(self, agent: int, t: float, frame: Frame) -> None:
        cfg = self.cfg
        if agent == 0:
            self.init_pending_a[int(round(t * 1e9))] = frame
            # Bound the pairing buffer.
            if len(self.init_pending_a) > 200:
                for key in sorted(self.init_pending_a)[:-200]:
                    del self.init_pending_a[key]
            return
        # Agent B forwards frames at the init keyframe cadence plus its
        # inertial batch since the previous send.
        if t - self.init_last_sent_b < cfg.init.kf_interval - 1e-9:
            return
        self.init_last_sent_b = t
        msg = comms.KeyframeMsg(
            agent_id=1, kf_id=INIT_FRAME_BIT | self.init_frames_sent_b,
            t_ns=int(round(t * 1e9)), q=np.array([1.0, 0.0, 0.0, 0.0]),
            p=np.zeros(3), cov6=np.eye(6),
            uv=frame.uv.astype(np.float32), octave=frame.octave,
            desc=frame.desc)
        self.init_frames_sent_b += 1
        self.agents[1]._send(t, comms.MSG_KEYFRAME, msg.to_bytes())
        batch = [(ti, a, g) for ti, a, g in self.agents[1].imu_buf
                 if ti > self.init_last_imu_sent]
        if batch:
            self.init_last_imu_sent = batch[-1][0]
            imu_msg = comms.ImuBatchMsg(
                sender=1,
                t_ns=np.array([int(round(b[0] * 1e9)) for b in batch],
                              dtype=np.uint64),
                accel=np.vstack([b[1] for b in batch]),
                gyro=np.vstack([b[2] for b in batch]))
            self.agents[1]._send(t, comms.MSG_IMU_BATCH, imu_msg.to_bytes())

    def _init_try_pair(self, msg: comms.KeyframeMsg, t_now: float) -> None:
        t = msg.t_ns * 1e-9
        own = self.init_pending_a.get(msg.t_ns)
        if own is None:
            return
        frame_b = Frame(t, msg.uv.astype(float), msg.octave.copy(),
                        msg.desc.copy(),
                        np.full(msg.uv.shape[0], -1, dtype=np.int64))
        before = self.session.resets
        status = self.session.add_frames(own, frame_b)
        self.init_info["resets"] = self.session.resets
        if self.session.resets > before:
            return
        total = self.session.kf_count[0]
        if status == "ready":
            if total > self.cfg.init.target_keyframes + self.cfg.init.max_extra_keyframes:
                self.session.reset()
                return
            try:
                bundle, result = self.session.finalize()
            except ExcitationTooLow:
                return  # keep extending the window
            except AlignmentFailed:
                self.session.reset()
                return
            self._init_finish(bundle, result, t_now)

    def _init_finish(self, bundle, result, t_now: float) -> None:
        self.init_done = True
        self.init_info.update({
            "t_ready": t_now,
            "cond": result.cond,
            "keyframes": {a: self.session.kf_count[a] for a in (0, 1)},
            "digest_a": bundle.digest(),
        })
        # Broadcast to agent B, then bring agent A up on the same bundle.
        data = bundle.to_bytes()
        self.agents[0].init_digest = bundle.digest()
        self.agents[0]._send(t_now, comms.MSG_INIT_BUNDLE, data)
        smap_a = adopt_bundle(bundle, 0)
        kf_id, v_m = result.velocities[0][-1]
        v_s = quat_to_rot(smap_a.kfs[kf_id].pose.q).T @ v_m
        self.agents[0].start_steady(
            smap_a, result.q_wm, v_s, result.b_w[0],
            self.session.kf_count[0], t_now)
        self.init_pending_a.clear()

    def _adopt_on_b(self, msg: comms.InitBundleMsg, t_now: float) -> None:
        agent = self.agents[1]
        if agent.steady:
            return
        smap = adopt_bundle(msg, 1)
        states = {a: (v_s, b_w) for a, v_s, b_w in msg.imu_states}
        v_s, b_w = states[1]
        n_own = sum(1 for kf in msg.keyframes if kf.agent_id == 1)
        agent.init_digest = msg.digest()
        self.init_info["digest_b"] = msg.digest()
        agent.start_steady(smap, msg.q_wm, v_s, b_w, n_own, t_now)

    # -- steady state ----------------------------------------------------------

    def _steady_on_frame(self, agent_id: int, frame: Frame) -> None:
        agent = self.agents[agent_id]
        out = agent.handle_frame(frame)
        if out is None:
            return
        kf, matches = out
        agent.mapper_native(kf, matches)
        agent._send(kf.t, comms.MSG_KEYFRAME, agent.keyframe_msg(kf).to_bytes())
        agent.backend_rounds(kf.t)
        agent.record_and_prune(kf.t)

    def _on_net(self, dest: int, buf: bytes, t_now: float) -> None:
        try:
            msg_type, msg = comms.decode_message(buf)
        except (comms.MalformedMessage, comms.UnsupportedVersion):
            return
        agent = self.agents[dest]
        if msg_type == comms.MSG_KEYFRAME:
            if dest == 0 and not self.init_done:
                if msg.kf_id & INIT_FRAME_BIT:
                    self._init_try_pair(msg, t_now)
                return
            # Remote keyframes are ingested immediately; the solver itself
            # runs on the agent's own keyframe cadence.
            if agent.steady:
                agent.on_keyframe_msg(msg, t_now)
        elif msg_type == comms.MSG_DUAL:
            if agent.steady:
                agent.on_dual_msg(msg, t_now)
        elif msg_type == comms.MSG_IMU_BATCH:
            if dest == 0 and not self.init_done:
                for t_ns, accel, gyro in zip(msg.t_ns, msg.accel, msg.gyro):
                    self.session.add_imu(1, t_ns * 1e-9, accel, gyro)
        elif msg_type == comms.MSG_INIT_BUNDLE:
            if dest == 1:
                self._adopt_on_b(msg, t_now)

    # -- main loop ---------------------------------------------------------------

    def run(self) -> RunReport:
        cfg = self.cfg
        try:
            self._run_events()
        finally:
            self._write_artifacts()
        if not self.init_done:
            raise InitFailed(
                f"initialization incomplete after {cfg.duration:.1f} s "
                f"({self.init_info.get('resets', 0)} resets)")
        metrics = self._evaluate()
        write_metrics_json(self.out / "metrics.json", metrics)
        return RunReport(str(self.out), metrics,
                         agents=[self.agents[0], self.agents[1]])

    def _run_events(self) -> None:
        cfg = self.cfg
        dt_imu = 1.0 / cfg.imu.rate
        dt_frame = 1.0 / cfg.vision.rate
        dt_range = 1.0 / cfg.uwb.rate
        n_imu = int(round(self._t_end / dt_imu))
        n_frame = int(round(self._t_end / dt_frame))
        n_range = int(round(self._t_end / dt_range))

        for k in range(n_imu + 1):
            self._push(k * dt_imu, PRIO_TICK, "tick", k)
        for k in range(n_frame + 1):
            t = k * dt_frame
            self._push(t, PRIO_FRAME, "frame", 0)
            self._push(t, PRIO_FRAME, "frame", 1)
        for k in range(n_range + 1):
            self._push(k * dt_range, PRIO_RANGE, "range", None)
        if self.closed_loop:
            n_ctrl = int(round(self._t_end / cfg.controller.tick_dt))
            for k in range(1, n_ctrl + 1):
                self._push(k * cfg.controller.tick_dt, PRIO_CTRL, "ctrl", None)

        while self._heap:
            t, prio, _, kind, data = heapq.heappop(self._heap)
            if t > self._t_end + 1e-9:
                break
            if kind == "tick":
                if self.closed_loop:
                    self.followers[0].step()
                    self.followers[1].step()
                for a in (0, 1):
                    accel, gyro = self.imu_sim[a].sample(self.truth[a], t)
                    self.agents[a].handle_imu(t, accel, gyro)
                    if a == 0 and not self.init_done:
                        self.session.add_imu(0, t, accel, gyro)
            elif kind == "frame":
                a = data
                frame = self._frame(a, t)
                pose = self.truth[a].pose(t)
                self.gt_rows[a].append((t, pose))
                if self.agents[a].steady:
                    self._steady_on_frame(a, frame)
                elif not self.init_done:
                    self._init_on_frame(a, t, frame)
            elif kind == "range":
                d = uwb_range(self.truth[0], self.truth[1], t, cfg.uwb,
                              self.uwb_rng)
                for a in (0, 1):
                    self.agents[a].handle_range(t, d)
                if not self.init_done:
                    self.session.add_range(t, d)
            elif kind == "net":
                dest, buf = data
                self._on_net(dest, buf, t)
            elif kind == "ctrl":
                self._ctrl_tick(t)

        for a in (0, 1):
            if self.agents[a].steady:
                self.agents[a].flush_final()

    def _ctrl_tick(self, t: float) -> None:
        smap = self.agents[0].smap
        steady = self.agents[0].steady
        t_a, t_b, yaw = self.planner.targets(
            t, self.followers[0].p, self.followers[1].p, smap, steady)
        self.followers[0].set_target(t_a.p, yaw)
        self.followers[1].set_target(t_b.p, yaw)

    # -- artifacts ---------------------------------------------------------------

    @staticmethod
    def _write_traj(path: Path, rows) -> None:
        with open(path, "w") as fh:
            fh.write("t,px,py,pz,qw,qx,qy,qz\n")
            for t, pose in rows:
                p, q = pose.p, pose.q
                fh.write(f"{t:.6f},{p[0]:.9f},{p[1]:.9f},{p[2]:.9f},"
                         f"{q[0]:.9f},{q[1]:.9f},{q[2]:.9f},{q[3]:.9f}\n")

    def _write_artifacts(self) -> None:
        for a in (0, 1):
            agent = self.agents[a]
            self._write_traj(self.out / f"traj_{'ab'[a]}.csv",
                             [(r.t, r.pose) for r in agent.traj_rows])
            self._write_traj(self.out / f"gt_{'ab'[a]}.csv", self.gt_rows[a])
            with open(self.out / f"kf_final_{'ab'[a]}.csv", "w") as fh:
                fh.write("kf_id,t,px,py,pz,qw,qx,qy,qz\n")
                for kf_id in sorted(agent.kf_final):
                    t, pose = agent.kf_final[kf_id]
                    p, q = pose.p, pose.q
                    fh.write(f"{kf_id},{t:.6f},{p[0]:.9f},{p[1]:.9f},"
                             f"{p[2]:.9f},{q[0]:.9f},{q[1]:.9f},{q[2]:.9f},"
                             f"{q[3]:.9f}\n")
        self.bandwidth.to_csv(self.out / "bandwidth.csv")
        write_metrics_json(self.out / "timing.json",
                           timing_report([self.agents[0], self.agents[1]]))
        from .config import save as save_config
        save_config(self.cfg, self.out / "config.json")

    def _evaluate(self) -> dict:
        metrics: dict = {"init": self.init_info}
        ates = {}
        for a in (0, 1):
            agent = self.agents[a]
            est_t = np.array([r.t for r in agent.traj_rows])
            est_p = np.array([r.pose.p for r in agent.traj_rows]) \
                if agent.traj_rows else np.zeros((0, 3))
            gt_t = np.array([t for t, _ in self.gt_rows[a]])
            gt_p = np.array([pose.p for _, pose in self.gt_rows[a]])
            key = "ab"[a]
            if est_t.size >= 3:
                ie, ig = associate(est_t, gt_t)
                err = align_trajectories(est_p[ie], gt_p[ig])
                ates[a] = err.ate_rmse
                metrics[f"ate_{key}"] = err.ate_rmse
                metrics[f"n_poses_{key}"] = int(est_t.size)
            metrics[f"n_kfs_{key}"] = agent.n_native_kfs + \
                self.session.kf_count[a]
            metrics[f"lost_frames_{key}"] = agent.lost_total
        if len(ates) == 2:
            est_all, gt_all = [], []
            for a in (0, 1):
                agent = self.agents[a]
                est_t = np.array([r.t for r in agent.traj_rows])
                est_p = np.array([r.pose.p for r in agent.traj_rows])
                gt_t = np.array([t for t, _ in self.gt_rows[a]])
                gt_p = np.array([pose.p for _, pose in self.gt_rows[a]])
                ie, ig = associate(est_t, gt_t)
                est_all.append(est_p[ie])
                gt_all.append(gt_p[ig])
            err = align_trajectories(np.vstack(est_all), np.vstack(gt_all))
            metrics["ate_combined"] = err.ate_rmse
            metrics["ate_max_individual"] = max(ates.values())
        kf_events = sum(self.agents[a].kf_events for a in (0, 1))
        rounds = sum(self.agents[a].admm_rounds for a in (0, 1))
        metrics["admm_rounds_per_kf"] = rounds / max(kf_events, 1)
        metrics["bandwidth_total_KBps"] = self.bandwidth.mean_total_rate()
        metrics["consistency"] = self._consistency()
        return metrics

    def _consistency(self, skip: float = 15.0) -> dict:
        fa, fb = self.agents[0].kf_final, self.agents[1].kf_final
        shared = sorted(set(fa) & set(fb))
        dp, dth = [], []
        for kf_id in shared:
            t, pa = fa[kf_id]
            if t < skip:
                continue
            _, pb = fb[kf_id]
            dp.append(float(np.linalg.norm(pa.p - pb.p)))
            dth.append(float(np.linalg.norm(boxminus(pa.q, pb.q))))
        if not dp:
            return {"n_shared": 0}
        return {
            "n_shared": len(dp),
            "skip_s": skip,
            "pos_median_m": float(np.median(dp)),
            "pos_max_m": float(np.max(dp)),
            "rot_median_rad": float(np.median(dth)),
            "rot_max_rad": float(np.max(dth)),
        }


def run_scenario(cfg: ScenarioConfig, out_dir: str | Path) -> RunReport:
    """Execute one scenario in the configured mode and write all artifacts."""
    if cfg.mode == "single":
        return OfflineRunner(cfg, out_dir).run()
    if cfg.mode == "duo":
        from .realtime import run_duo
        return run_duo(cfg, out_dir)
    raise ValueError(f"unknown mode {cfg.mode!r}")


# ---------------------------------------------------------------------------
# Sparsity benchmark
# ---------------------------------------------------------------------------


def benchmark_sparsity(cfg: ScenarioConfig, out_path: str | Path | None = None,
                       duration: float = 8.0, kf_interval: float = 0.15,
                       n_points: int = 4500, speed: float = 8.0) -> dict:
    """Interpolation-structure benchmark on a matched synthetic problem.

    Builds one window with the configured keyframe spacing plus two padding
    poses at both ends, observes a shared landmark field, and reports the
    structural Jacobian and Hessian sparsity for both interpolation bases.
    The flight speed is raised above the survey default so the camera
    footprint sweeps the field and feature tracks have realistic bounded
    lengths instead of spanning the whole window.
    """
    rng = np.random.default_rng(cfg.seed)
    cam = camera_from_config(cfg.camera)
    traj_cfg = replace(cfg.trajectory, speed=speed)
    ta, tb = build_trajectories(traj_cfg, cfg.formation_baseline)
    truth = {0: ta, 1: tb}
    smap = SlamMap(agent=0)

    n_kf = int(round(duration / kf_interval)) + 1
    pad = 2
    times = np.arange(-pad, n_kf + pad) * kf_interval
    for a in (0, 1):
        for i, t in enumerate(times):
            pose = truth[a].pose(max(t, 0.0))
            smap.add_keyframe(Keyframe(
                kf_id=(a << 56) | i, agent=a, t=float(t),
                uv=np.zeros((1, 2)), octave=np.zeros(1, dtype=np.uint8),
                desc=np.zeros((1, 48), dtype=np.uint8),
                pose=pose, cov6=np.eye(6), native=(a == 0)))

    # Landmarks spread under the flight path, each seen by several poses.
    kfs = smap.keyframes_by_time()
    centers = np.array([kf.pose.p for kf in kfs])
    lo = centers.min(axis=0) - [20.0, 20.0, 0.0]
    hi = centers.max(axis=0) + [20.0, 20.0, 0.0]
    pts = rng.uniform(lo, hi, size=(n_points, 3))
    pts[:, 2] = rng.uniform(-2.0, 2.0, size=n_points)

    # Guard against unbounded per-frame landmark counts (two detector
    # budgets per stereo keyframe); nearest-to-image-center selection keeps
    # each track contiguous along the trajectory when the cap binds.
    budget = 2 * cfg.vision.max_keypoints
    seen_by: dict[int, list[int]] = defaultdict(list)
    for kf in kfs:
        T_CW = cam.T_CS @ kf.pose.inverse()
        m_C = pts @ quat_to_rot(T_CW.q).T + T_CW.p
        uv, valid = cam.project_many(m_C)
        idx = np.flatnonzero(valid)
        if idx.size > budget:
            r2 = ((uv[idx] - [cam.cx, cam.cy]) ** 2).sum(axis=1)
            idx = idx[np.argsort(r2, kind="stable")[:budget]]
        for j in idx:
            seen_by[int(j)].append(kf.kf_id)
    for j, kf_ids in sorted(seen_by.items()):
        if len(kf_ids) < 2:
            continue
        mp_id = j + 1
        smap.mps[mp_id] = MapPoint(
            mp_id=mp_id, position=pts[j], cov=np.eye(3) * 0.01,
            desc=np.zeros(48, dtype=np.uint8),
            obs={kf_id: 0 for kf_id in kf_ids})

    win = build_window(smap, estimator_sigma_px(cfg))
    problem = build_problem(win, None, cfg.backend, cam)
    reports = {}
    for basis in ("z", "b"):
        reports[basis] = jacobian_sparsity_report(problem, interpolation=basis)
    rz, rb = reports["z"], reports["b"]
    out = {
        "n_keyframes": len(kfs),
        "n_map_points": len(smap.mps),
        "z": dict(rz.__dict__),
        "b": dict(rb.__dict__),
        "pose_block_ratio": rz.jacobian_pose_blocks
        / max(rb.jacobian_pose_blocks, 1),
        "hessian_reduction": 1.0 - rz.hessian_nnz / max(rb.hessian_nnz, 1),
    }
    if out_path is not None:
        with open(out_path, "w") as fh:
            fh.write("basis,jacobian_nnz,jacobian_pose_blocks,hessian_nnz\n")
            for basis in ("z", "b"):
                rep = reports[basis]
                fh.write(f"{basis},{rep.jacobian_nnz},"
                         f"{rep.jacobian_pose_blocks},{rep.hessian_nnz}\n")
    return out
