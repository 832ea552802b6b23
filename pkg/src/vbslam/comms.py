"""Binary wire format and pluggable transports for the two-agent link.

Envelope layout (little-endian): magic "VBS1", version u16, message type
u8, payload length u32, payload bytes, CRC32 over type byte + payload.
Message types: 1 keyframe, 2 dual vector batch, 3 init bundle, 4 raw IMU
batch (init support traffic).
"""

from __future__ import annotations

import hashlib
import heapq
import queue
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"VBS1"
VERSION = 1
HEADER = struct.Struct("<4sHBI")

MSG_KEYFRAME = 1
MSG_DUAL = 2
MSG_INIT_BUNDLE = 3
MSG_IMU_BATCH = 4

_KP_DTYPE = np.dtype([("uv", "<f4", (2,)), ("octave", "u1"), ("desc", "u1", (48,))])
_IMU_DTYPE = np.dtype([("t_ns", "<u8"), ("accel", "<f8", (3,)), ("gyro", "<f8", (3,))])
_TRIL = np.tril_indices(6)


class MalformedMessage(Exception):
    pass


class UnsupportedVersion(Exception):
    pass


class TransportClosed(Exception):
    pass


def pack_envelope(msg_type: int, payload: bytes) -> bytes:
    head = HEADER.pack(MAGIC, VERSION, msg_type, len(payload))
    crc = zlib.crc32(bytes([msg_type]) + payload) & 0xFFFFFFFF
    return head + payload + struct.pack("<I", crc)


def unpack_envelope(buf: bytes) -> tuple[int, bytes]:
    if len(buf) < HEADER.size + 4:
        raise MalformedMessage("truncated envelope")
    magic, version, msg_type, length = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise MalformedMessage("bad magic")
    if version != VERSION:
        raise UnsupportedVersion(str(version))
    end = HEADER.size + length
    if len(buf) != end + 4:
        raise MalformedMessage("length mismatch")
    payload = buf[HEADER.size:end]
    (crc,) = struct.unpack_from("<I", buf, end)
    if crc != (zlib.crc32(bytes([msg_type]) + payload) & 0xFFFFFFFF):
        raise MalformedMessage("bad crc")
    return msg_type, payload


def _pack_cov_lower(cov: np.ndarray) -> bytes:
    return np.ascontiguousarray(cov[_TRIL], dtype="<f8").tobytes()


def _unpack_cov_lower(buf: bytes) -> np.ndarray:
    vals = np.frombuffer(buf, dtype="<f8", count=21)
    cov = np.zeros((6, 6))
    cov[_TRIL] = vals
    cov = cov + cov.T - np.diag(np.diag(cov))
    return cov


@dataclass
class KeyframeMsg:
    agent_id: int
    kf_id: int
    t_ns: int
    q: np.ndarray  # wxyz
    p: np.ndarray
    cov6: np.ndarray
    uv: np.ndarray  # (k, 2) float32
    octave: np.ndarray  # (k,) uint8
    desc: np.ndarray  # (k, 48) uint8

    def payload(self) -> bytes:
        k = self.uv.shape[0]
        head = struct.pack("<BQQ", self.agent_id, self.kf_id, self.t_ns)
        pose = np.concatenate([self.q, self.p]).astype("<f8").tobytes()
        cov = _pack_cov_lower(self.cov6)
        rec = np.empty(k, dtype=_KP_DTYPE)
        rec["uv"] = self.uv
        rec["octave"] = self.octave
        rec["desc"] = self.desc
        return head + pose + cov + struct.pack("<I", k) + rec.tobytes()

    def to_bytes(self) -> bytes:
        return pack_envelope(MSG_KEYFRAME, self.payload())

    @staticmethod
    def from_payload(payload: bytes) -> "KeyframeMsg":
        fixed = struct.Struct("<BQQ")
        if len(payload) < fixed.size + 56 + 168 + 4:
            raise MalformedMessage("keyframe payload too short")
        agent_id, kf_id, t_ns = fixed.unpack_from(payload, 0)
        off = fixed.size
        pose = np.frombuffer(payload, dtype="<f8", count=7, offset=off)
        off += 56
        cov6 = _unpack_cov_lower(payload[off:off + 168])
        off += 168
        (k,) = struct.unpack_from("<I", payload, off)
        off += 4
        if len(payload) != off + k * _KP_DTYPE.itemsize:
            raise MalformedMessage("keypoint block size mismatch")
        if np.linalg.eigvalsh(cov6).min() < -1e-9:
            raise MalformedMessage("covariance not PSD")
        rec = np.frombuffer(payload, dtype=_KP_DTYPE, count=k, offset=off)
        return KeyframeMsg(
            agent_id=agent_id, kf_id=kf_id, t_ns=t_ns,
            q=pose[:4].copy(), p=pose[4:].copy(), cov6=cov6,
            uv=rec["uv"].astype(np.float32).reshape(k, 2),
            octave=rec["octave"].copy(), desc=rec["desc"].reshape(k, 48).copy())


@dataclass
class DualMsg:
    sender: int
    entries: list  # [(kf_id, 6-vector)]

    def payload(self) -> bytes:
        entries = sorted(self.entries, key=lambda e: e[0])
        out = [struct.pack("<BI", self.sender, len(entries))]
        for kf_id, z in entries:
            out.append(struct.pack("<Q", kf_id))
            out.append(np.asarray(z, dtype="<f8").tobytes())
        return b"".join(out)

    def to_bytes(self) -> bytes:
        return pack_envelope(MSG_DUAL, self.payload())

    @staticmethod
    def from_payload(payload: bytes) -> "DualMsg":
        if len(payload) < 5:
            raise MalformedMessage("dual payload too short")
        sender, n = struct.unpack_from("<BI", payload, 0)
        off = 5
        if len(payload) != off + n * 56:
            raise MalformedMessage("dual payload size mismatch")
        entries = []
        prev = -1
        for _ in range(n):
            (kf_id,) = struct.unpack_from("<Q", payload, off)
            off += 8
            z = np.frombuffer(payload, dtype="<f8", count=6, offset=off).copy()
            off += 48
            if kf_id <= prev:
                raise MalformedMessage("dual ids not strictly increasing")
            prev = kf_id
            entries.append((kf_id, z))
        return DualMsg(sender, entries)


@dataclass
class MapPointRecord:
    mp_id: int
    position: np.ndarray
    cov: np.ndarray  # (3,3)
    desc: np.ndarray  # (48,) uint8
    obs: list  # [(kf_id, kp_index)]


@dataclass
class InitBundleMsg:
    sender: int
    q_wm: np.ndarray
    imu_states: list  # per agent: (agent_id, v (3,), b_w (3,))
    keyframes: list  # KeyframeMsg
    map_points: list  # MapPointRecord

    def payload(self) -> bytes:
        out = [struct.pack("<B", self.sender),
               np.asarray(self.q_wm, dtype="<f8").tobytes(),
               struct.pack("<B", len(self.imu_states))]
        for agent_id, v, b_w in self.imu_states:
            out.append(struct.pack("<B", agent_id))
            out.append(np.concatenate([v, b_w]).astype("<f8").tobytes())
        out.append(struct.pack("<I", len(self.keyframes)))
        for kf in self.keyframes:
            blob = kf.payload()
            out.append(struct.pack("<I", len(blob)))
            out.append(blob)
        out.append(struct.pack("<I", len(self.map_points)))
        for mp in self.map_points:
            out.append(struct.pack("<Q", mp.mp_id))
            out.append(np.asarray(mp.position, dtype="<f8").tobytes())
            tril = np.tril_indices(3)
            out.append(np.ascontiguousarray(mp.cov[tril], dtype="<f8").tobytes())
            out.append(mp.desc.astype("u1").tobytes())
            out.append(struct.pack("<H", len(mp.obs)))
            for kf_id, kp in mp.obs:
                out.append(struct.pack("<QI", kf_id, kp))
        return b"".join(out)

    def to_bytes(self) -> bytes:
        return pack_envelope(MSG_INIT_BUNDLE, self.payload())

    def digest(self) -> str:
        return hashlib.sha256(self.payload()).hexdigest()

    @staticmethod
    def from_payload(payload: bytes) -> "InitBundleMsg":
        try:
            off = 0
            (sender,) = struct.unpack_from("<B", payload, off)
            off += 1
            q_wm = np.frombuffer(payload, dtype="<f8", count=4, offset=off).copy()
            off += 32
            (n_agents,) = struct.unpack_from("<B", payload, off)
            off += 1
            imu_states = []
            for _ in range(n_agents):
                (agent_id,) = struct.unpack_from("<B", payload, off)
                off += 1
                vec = np.frombuffer(payload, dtype="<f8", count=6, offset=off)
                off += 48
                imu_states.append((agent_id, vec[:3].copy(), vec[3:].copy()))
            (n_kf,) = struct.unpack_from("<I", payload, off)
            off += 4
            keyframes = []
            for _ in range(n_kf):
                (blob_len,) = struct.unpack_from("<I", payload, off)
                off += 4
                keyframes.append(
                    KeyframeMsg.from_payload(payload[off:off + blob_len]))
                off += blob_len
            (n_mp,) = struct.unpack_from("<I", payload, off)
            off += 4
            mps = []
            for _ in range(n_mp):
                (mp_id,) = struct.unpack_from("<Q", payload, off)
                off += 8
                pos = np.frombuffer(payload, dtype="<f8", count=3, offset=off).copy()
                off += 24
                vals = np.frombuffer(payload, dtype="<f8", count=6, offset=off)
                off += 48
                cov = np.zeros((3, 3))
                tril = np.tril_indices(3)
                cov[tril] = vals
                cov = cov + cov.T - np.diag(np.diag(cov))
                desc = np.frombuffer(payload, dtype="u1", count=48, offset=off).copy()
                off += 48
                (n_obs,) = struct.unpack_from("<H", payload, off)
                off += 2
                obs = []
                for _ in range(n_obs):
                    kf_id, kp = struct.unpack_from("<QI", payload, off)
                    off += 12
                    obs.append((kf_id, kp))
                mps.append(MapPointRecord(mp_id, pos, cov, desc, obs))
            if off != len(payload):
                raise MalformedMessage("init bundle trailing bytes")
        except struct.error as exc:
            raise MalformedMessage(str(exc)) from exc
        return InitBundleMsg(sender, q_wm, imu_states, keyframes, mps)


@dataclass
class ImuBatchMsg:
    sender: int
    t_ns: np.ndarray  # (n,) uint64
    accel: np.ndarray  # (n, 3)
    gyro: np.ndarray  # (n, 3)

    def payload(self) -> bytes:
        rec = np.empty(self.t_ns.shape[0], dtype=_IMU_DTYPE)
        rec["t_ns"] = self.t_ns
        rec["accel"] = self.accel
        rec["gyro"] = self.gyro
        return struct.pack("<BI", self.sender, rec.shape[0]) + rec.tobytes()

    def to_bytes(self) -> bytes:
        return pack_envelope(MSG_IMU_BATCH, self.payload())

    @staticmethod
    def from_payload(payload: bytes) -> "ImuBatchMsg":
        if len(payload) < 5:
            raise MalformedMessage("imu batch too short")
        sender, n = struct.unpack_from("<BI", payload, 0)
        if len(payload) != 5 + n * _IMU_DTYPE.itemsize:
            raise MalformedMessage("imu batch size mismatch")
        rec = np.frombuffer(payload, dtype=_IMU_DTYPE, count=n, offset=5)
        return ImuBatchMsg(sender, rec["t_ns"].copy(), rec["accel"].copy(),
                           rec["gyro"].copy())


_PARSERS = {
    MSG_KEYFRAME: KeyframeMsg.from_payload,
    MSG_DUAL: DualMsg.from_payload,
    MSG_INIT_BUNDLE: InitBundleMsg.from_payload,
    MSG_IMU_BATCH: ImuBatchMsg.from_payload,
}


def decode_message(buf: bytes):
    """Envelope check plus payload parse; returns (msg_type, message)."""
    msg_type, payload = unpack_envelope(buf)
    parser = _PARSERS.get(msg_type)
    if parser is None:
        raise MalformedMessage(f"unknown message type {msg_type}")
    return msg_type, parser(payload)


# --------------------------------------------------------------------------
# Delivery policies and transports
# --------------------------------------------------------------------------


@dataclass
class LinkPolicy:
    delay_ms: float = 0.0
    jitter_ms: float = 0.0
    drop_prob: float = 0.0
    reorder_prob: float = 0.0

    def sample_delay(self, rng) -> float:
        d = self.delay_ms / 1e3
        if self.jitter_ms > 0:
            d += abs(rng.normal(0.0, self.jitter_ms / 1e3))
        if self.reorder_prob > 0 and rng.random() < self.reorder_prob:
            d += rng.uniform(0.0, 2.0 * max(self.delay_ms, 10.0) / 1e3)
        return d

    def dropped(self, rng) -> bool:
        return self.drop_prob > 0 and rng.random() < self.drop_prob


class SimLink:
    """Virtual-time link: send() returns scheduled (deliver_t, bytes) pairs."""

    def __init__(self, policy: LinkPolicy, rng):
        self.policy = policy
        self.rng = rng
        self.sent_bytes = 0
        self.dropped = 0
        self._seq = 0

    def send(self, data: bytes, t_now: float):
        self.sent_bytes += len(data)
        if self.policy.dropped(self.rng):
            self.dropped += 1
            return []
        self._seq += 1
        return [(t_now + self.policy.sample_delay(self.rng), self._seq, data)]


class ThreadedLink:
    """Wall-clock link endpoint pair with a delay scheduler thread."""

    def __init__(self, policy: LinkPolicy, seed: int = 0, capacity: int = 512):
        self.policy = policy
        self.rng = np.random.default_rng(seed)
        self.capacity = capacity
        self.queues = {0: queue.Queue(), 1: queue.Queue()}
        self.overflow = {0: 0, 1: 0}
        self._heap = []
        self._cond = threading.Condition()
        self._closed = False
        self._seq = 0
        self._thread = threading.Thread(target=self._pump, daemon=True)
        self._thread.start()

    def send(self, dest: int, data: bytes) -> None:
        if self._closed:
            raise TransportClosed()
        with self._cond:
            if self.policy.dropped(self.rng):
                return
            deadline = time.monotonic() + self.policy.sample_delay(self.rng)
            self._seq += 1
            heapq.heappush(self._heap, (deadline, self._seq, dest, data, time.monotonic()))
            self._cond.notify()

    def recv(self, dest: int, timeout: float | None = None):
        """Returns (bytes, latency_s) or None on timeout."""
        if self._closed and self.queues[dest].empty():
            raise TransportClosed()
        try:
            return self.queues[dest].get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify()
        self._thread.join(timeout=1.0)

    def _pump(self) -> None:
        while True:
            with self._cond:
                while not self._closed and (
                        not self._heap or self._heap[0][0] > time.monotonic()):
                    if self._heap:
                        self._cond.wait(timeout=max(
                            self._heap[0][0] - time.monotonic(), 0.0) + 1e-4)
                    else:
                        self._cond.wait(timeout=0.05)
                if self._closed and not self._heap:
                    return
                if not self._heap or self._heap[0][0] > time.monotonic():
                    continue
                _, _, dest, data, t_sent = heapq.heappop(self._heap)
            q = self.queues[dest]
            if q.qsize() >= self.capacity:
                try:
                    q.get_nowait()
                    self.overflow[dest] += 1
                except queue.Empty:
                    pass
            q.put((data, time.monotonic() - t_sent))


_CHUNK = struct.Struct("<IHH")
_MAX_DGRAM = 60000


class UdpEndpoint:
    """Datagram endpoint with chunked reassembly for large messages."""

    def __init__(self, local_port: int, remote_port: int, host: str = "127.0.0.1"):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((host, local_port))
        self.sock.settimeout(0.05)
        self.remote = (host, remote_port)
        self._seq = 0
        self._partial: dict[int, dict] = {}
        self._closed = False

    def send(self, data: bytes) -> None:
        if self._closed:
            raise TransportClosed()
        self._seq += 1
        n_chunks = max(1, (len(data) + _MAX_DGRAM - 1) // _MAX_DGRAM)
        for i in range(n_chunks):
            chunk = data[i * _MAX_DGRAM:(i + 1) * _MAX_DGRAM]
            self.sock.sendto(_CHUNK.pack(self._seq, i, n_chunks) + chunk, self.remote)

    def recv(self, timeout: float = 0.05):
        if self._closed:
            raise TransportClosed()
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            try:
                dgram, _ = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                raise TransportClosed()
            seq, idx, total = _CHUNK.unpack_from(dgram, 0)
            body = dgram[_CHUNK.size:]
            if total == 1:
                return body
            slot = self._partial.setdefault(seq, {})
            slot[idx] = body
            if len(slot) == total:
                del self._partial[seq]
                return b"".join(slot[i] for i in range(total))
        return None

    def close(self) -> None:
        self._closed = True
        self.sock.close()


class BandwidthMonitor:
    """Byte counters per (agent, message type) with sliding-window rates."""

    def __init__(self):
        self.events = []  # (t, agent, msg_type, nbytes)

    def record(self, t: float, agent: int, msg_type: int, nbytes: int) -> None:
        self.events.append((t, agent, msg_type, nbytes))

    def rate(self, t_now: float, window: float = 1.0, msg_type=None, agent=None):
        """KB/s over [t_now - window, t_now]."""
        total = 0
        for t, a, m, n in self.events:
            if t_now - window <= t <= t_now:
                if msg_type is not None and m != msg_type:
                    continue
                if agent is not None and a != agent:
                    continue
                total += n
        return total / window / 1024.0

    def series(self, bin_width: float = 1.0):
        """Per-bin totals: list of (bin_start, {msg_type: KB/s})."""
        if not self.events:
            return []
        t0 = min(e[0] for e in self.events)
        t1 = max(e[0] for e in self.events)
        n_bins = int(np.floor((t1 - t0) / bin_width)) + 1
        bins = [dict() for _ in range(n_bins)]
        for t, _, m, n in self.events:
            b = int((t - t0) / bin_width)
            bins[b][m] = bins[b].get(m, 0) + n
        return [
            (t0 + i * bin_width,
             {m: v / bin_width / 1024.0 for m, v in d.items()})
            for i, d in enumerate(bins)
        ]

    def mean_total_rate(self, t_start=None, t_end=None) -> float:
        """Average KB/s over the covered span (or a sub-span)."""
        ev = [e for e in self.events
              if (t_start is None or e[0] >= t_start)
              and (t_end is None or e[0] <= t_end)]
        if not ev:
            return 0.0
        span = max(e[0] for e in ev) - min(e[0] for e in ev)
        span = max(span, 1.0)
        return sum(e[3] for e in ev) / span / 1024.0

    def to_csv(self, path: str, bin_width: float = 1.0) -> None:
        names = {MSG_KEYFRAME: "keyframe", MSG_DUAL: "dual",
                 MSG_INIT_BUNDLE: "init_bundle", MSG_IMU_BATCH: "imu_batch"}
        with open(path, "w") as fh:
            fh.write("t,keyframe_kbps,dual_kbps,init_bundle_kbps,imu_batch_kbps,total_kbps\n")
            for t, d in self.series(bin_width):
                cols = [d.get(m, 0.0) for m in
                        (MSG_KEYFRAME, MSG_DUAL, MSG_INIT_BUNDLE, MSG_IMU_BATCH)]
                fh.write(f"{t:.3f}," + ",".join(f"{c:.3f}" for c in cols)
                         + f",{sum(cols):.3f}\n")
