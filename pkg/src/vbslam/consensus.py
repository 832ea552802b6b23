"""Asynchronous consensus bookkeeping for the two-agent optimizer.

Each shared keyframe pose carries one local dual vector and the latest
dual received from the peer. The damped update

    z <- z - eta * ((z + z_bar) / 2 + gamma * x)

drives both copies of the pose toward agreement even when z_bar is stale;
x is the pose offset from the fixed per-keyframe reference (rotation as a
tangent vector, translation as a plain difference), matching the offset
used by the consensus residuals in the backend.
"""

from __future__ import annotations

import numpy as np

from .config import BackendConfig
from .geom import Pose, boxminus


def dual_update_step(z, z_bar, x, eta, gamma):
    """One damped dual ascent step; works on scalars and vectors alike."""
    z = np.asarray(z, dtype=float)
    z_bar = np.asarray(z_bar, dtype=float)
    x = np.asarray(x, dtype=float)
    return z - eta * (0.5 * (z + z_bar) + gamma * x)


def prox_quadratic(a, z_bar, gamma):
    """argmin_x (x - a)^2 + z_bar * x + (gamma / 2) x^2, elementwise."""
    return (2.0 * np.asarray(a) - np.asarray(z_bar)) / (2.0 + gamma)


class _Entry:
    __slots__ = ("z", "z_bar", "ref_pose", "age")

    def __init__(self, ref_pose: Pose):
        self.z = np.zeros(6)
        self.z_bar = np.zeros(6)
        self.ref_pose = ref_pose.copy()
        self.age = 0


class ConsensusState:
    """Per-keyframe dual variables and fixed consensus references."""

    def __init__(self, cfg: BackendConfig, buffer_ttl: float = 1.0):
        self.cfg = cfg
        self.entries: dict[int, _Entry] = {}
        self._pending: dict[int, tuple[float, np.ndarray]] = {}
        self._ttl = buffer_ttl

    def register_kf(self, kf_id: int, ref_pose: Pose, t_now: float = 0.0) -> None:
        if kf_id in self.entries:
            return
        entry = _Entry(ref_pose)
        pending = self._pending.pop(kf_id, None)
        if pending is not None:
            entry.z_bar = pending[1]
        self.entries[kf_id] = entry

    def has(self, kf_id: int) -> bool:
        return kf_id in self.entries

    def drop(self, kf_id: int) -> None:
        self.entries.pop(kf_id, None)

    def keep_only(self, kf_ids) -> None:
        keep = set(kf_ids)
        for kf_id in [k for k in self.entries if k not in keep]:
            del self.entries[kf_id]

    def sum_duals(self, kf_id: int) -> np.ndarray:
        """Latest received dual for the single inter-agent edge."""
        return self.entries[kf_id].z_bar.copy()

    def dual_map(self) -> dict[int, np.ndarray]:
        """kf id -> z_bar, as consumed by the problem builder."""
        return {k: e.z_bar.copy() for k, e in self.entries.items()}

    def apply_delay_policy(self, age: int) -> float:
        eta0 = self.cfg.eta
        if getattr(self.cfg, "eta_schedule", False):
            return eta0 / (1.0 + age / self.cfg.eta_tau)
        return eta0

    def dual_update(self, poses: dict[int, Pose]) -> list[tuple[int, np.ndarray]]:
        """Update every registered dual from the optimized poses.

        Returns (kf id, dual) pairs sorted by keyframe id for transmission.
        """
        gamma6 = np.concatenate([
            np.full(3, self.cfg.gamma_q), np.full(3, self.cfg.gamma_p)])
        out = []
        for kf_id in sorted(self.entries):
            entry = self.entries[kf_id]
            pose = poses.get(kf_id)
            if pose is None:
                continue
            x = np.concatenate([
                boxminus(pose.q, entry.ref_pose.q), pose.p - entry.ref_pose.p])
            eta = self.apply_delay_policy(entry.age)
            entry.z = dual_update_step(entry.z, entry.z_bar, x, eta, gamma6)
            entry.age += 1
            out.append((kf_id, entry.z.copy()))
        return out

    def ingest_remote(self, entries, t_now: float = 0.0) -> None:
        """Latest-wins ingestion of remote duals; unknown ids are buffered."""
        for kf_id, z in entries:
            entry = self.entries.get(kf_id)
            if entry is not None:
                entry.z_bar = np.asarray(z, dtype=float).copy()
                entry.age = 0
            else:
                self._pending[kf_id] = (t_now, np.asarray(z, dtype=float).copy())
        stale = [k for k, (t, _) in self._pending.items() if t_now - t > self._ttl]
        for k in stale:
            del self._pending[k]
