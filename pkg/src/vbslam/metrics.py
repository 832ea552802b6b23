"""Trajectory evaluation: similarity alignment, absolute and relative
errors, and sliding-window scale-error statistics.

All routines are offline post-processing over position arrays (n, 3) and
optional scalar-first quaternion arrays (n, 4).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import quat_conj, rotate


class DegenerateConfiguration(RuntimeError):
    """Raised when an alignment problem has no unique solution."""


class TrajectoryTooShort(RuntimeError):
    """Raised when a trajectory cannot cover the requested window."""


@dataclass
class Similarity:
    """Similarity transform y = s * R @ x + t."""

    s: float
    R: np.ndarray
    t: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.s * points @ self.R.T + self.t


@dataclass
class AlignedError:
    similarity: Similarity
    ate_rmse: float
    residuals: np.ndarray


def umeyama_align(est: np.ndarray, gt: np.ndarray,
                  with_scale: bool = True) -> Similarity:
    """Closed-form least-squares similarity mapping est onto gt.

    Returns the reflection-free solution (det R = +1). Requires at least
    three non-collinear correspondences.
    """
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise ValueError("point arrays must both have shape (n, 3)")
    n = est.shape[0]
    if n < 3:
        raise DegenerateConfiguration("need at least 3 correspondences")

    mu_e = est.mean(axis=0)
    mu_g = gt.mean(axis=0)
    ec = est - mu_e
    gc = gt - mu_g

    cov = gc.T @ ec / n
    U, d, Vt = np.linalg.svd(cov)
    # Collinear (or coincident) points leave the rotation about the line
    # unconstrained: the cross-covariance then has rank < 2.
    spread = np.linalg.svd(ec, compute_uv=False)
    if spread[1] < 1e-12 * max(spread[0], 1.0):
        raise DegenerateConfiguration("correspondences are collinear")

    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0.0:
        S[2, 2] = -1.0
    R = U @ S @ Vt

    if with_scale:
        var_e = float((ec ** 2).sum() / n)
        s = float(np.trace(np.diag(d) @ S) / var_e)
    else:
        s = 1.0
    t = mu_g - s * R @ mu_e
    return Similarity(s=s, R=R, t=t)


def align_trajectories(est: np.ndarray, gt: np.ndarray,
                       with_scale: bool = True) -> AlignedError:
    """Align est onto gt and report the RMSE of the residuals."""
    sim = umeyama_align(est, gt, with_scale=with_scale)
    res = np.asarray(gt, dtype=float) - sim.apply(est)
    rmse = float(np.sqrt((res ** 2).sum(axis=1).mean()))
    return AlignedError(similarity=sim, ate_rmse=rmse, residuals=res)


def ate_rmse(est: np.ndarray, gt: np.ndarray,
             with_scale: bool = True) -> float:
    return align_trajectories(est, gt, with_scale=with_scale).ate_rmse


def associate(t_est: np.ndarray, t_gt: np.ndarray,
              tol: float = 0.005) -> tuple[np.ndarray, np.ndarray]:
    """Pair each estimate timestamp with the nearest ground-truth one.

    Returns index arrays (into t_est and t_gt) for all pairs closer than
    tol seconds. Ground-truth timestamps must be sorted ascending.
    """
    t_est = np.asarray(t_est, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    pos = np.searchsorted(t_gt, t_est)
    lo = np.clip(pos - 1, 0, len(t_gt) - 1)
    hi = np.clip(pos, 0, len(t_gt) - 1)
    pick = np.where(np.abs(t_gt[hi] - t_est) < np.abs(t_gt[lo] - t_est),
                    hi, lo)
    keep = np.abs(t_gt[pick] - t_est) <= tol
    return np.nonzero(keep)[0], pick[keep]


@dataclass
class ScaleErrorSeries:
    starts: np.ndarray
    scales: np.ndarray
    errors: np.ndarray
    altitudes: np.ndarray


def scale_error_series(est: np.ndarray, gt: np.ndarray,
                       altitude: np.ndarray | None = None,
                       window: int = 100,
                       stride: int = 5) -> ScaleErrorSeries:
    """Sliding-window scale-error statistics.

    Each window of `window` consecutive poses is aligned to ground truth
    with a similarity transform and its scale recorded; the window then
    advances by `stride` poses. The per-window altitude (mean ground-truth
    height unless an explicit altitude array is given) stands in for the
    scene depth when binning.
    """
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    n = est.shape[0]
    if n < window:
        raise TrajectoryTooShort(
            f"trajectory has {n} poses, window needs {window}")
    if altitude is None:
        altitude = gt[:, 2]
    altitude = np.asarray(altitude, dtype=float)

    starts, scales, alts = [], [], []
    for i in range(0, n - window + 1, stride):
        sl = slice(i, i + window)
        sim = umeyama_align(est[sl], gt[sl], with_scale=True)
        starts.append(i)
        # Scale s maps the estimate onto ground truth, so the estimate's
        # own scale factor relative to truth is 1/s; report its error.
        scales.append(1.0 / sim.s)
        alts.append(float(altitude[sl].mean()))
    scales = np.array(scales)
    return ScaleErrorSeries(
        starts=np.array(starts, dtype=int),
        scales=scales,
        errors=np.abs(scales - 1.0),
        altitudes=np.array(alts),
    )


@dataclass
class AltitudeBin:
    lo: float
    hi: float
    count: int
    median: float
    mean: float
    std: float


def bin_by_altitude(series: ScaleErrorSeries,
                    edges: np.ndarray) -> list[AltitudeBin]:
    """Group the per-window scale errors into altitude bins."""
    edges = np.asarray(edges, dtype=float)
    bins = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        mask = (series.altitudes >= lo) & (series.altitudes < hi)
        err = series.errors[mask]
        if err.size == 0:
            bins.append(AltitudeBin(lo, hi, 0, np.nan, np.nan, np.nan))
        else:
            bins.append(AltitudeBin(lo, hi, int(err.size),
                                    float(np.median(err)),
                                    float(err.mean()),
                                    float(err.std())))
    return bins


@dataclass
class SegmentErrors:
    lengths: list[float]
    errors: dict[float, np.ndarray] = field(default_factory=dict)

    def median(self, length: float) -> float:
        return float(np.median(self.errors[length]))

    def summary(self) -> dict:
        out = {}
        for length in self.lengths:
            err = self.errors[length]
            out[str(length)] = {
                "count": int(err.size),
                "median_pct": float(np.median(err)) if err.size else np.nan,
                "mean_pct": float(err.mean()) if err.size else np.nan,
                "std_pct": float(err.std()) if err.size else np.nan,
            }
        return out


def relative_odometry_error(est: np.ndarray, gt: np.ndarray,
                            segment_lengths: list[float],
                            est_q: np.ndarray | None = None,
                            gt_q: np.ndarray | None = None,
                            stride: int = 5) -> SegmentErrors:
    """Segment-wise translation drift as percent of distance traveled.

    For each start pose (every `stride` frames) the first pose at least L
    meters of ground-truth path away closes the segment; the difference of
    the segment's end-point displacement between estimate and ground truth,
    expressed in the respective start frames when orientations are given,
    is reported as a percentage of the segment length.
    """
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    n = gt.shape[0]
    steps = np.linalg.norm(np.diff(gt, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(steps)])

    result = SegmentErrors(lengths=list(segment_lengths))
    for length in segment_lengths:
        if cum[-1] < length:
            raise TrajectoryTooShort(
                f"path covers {cum[-1]:.1f} m, segment needs {length} m")
        errs = []
        for i in range(0, n, stride):
            j = int(np.searchsorted(cum, cum[i] + length))
            if j >= n:
                break
            d_gt = gt[j] - gt[i]
            d_est = est[j] - est[i]
            if gt_q is not None and est_q is not None:
                d_gt = rotate(quat_conj(gt_q[i]), d_gt)
                d_est = rotate(quat_conj(est_q[i]), d_est)
            dist = cum[j] - cum[i]
            errs.append(np.linalg.norm(d_est - d_gt) / dist * 100.0)
        result.errors[length] = np.array(errs)
    return result


@dataclass
class TrajectoryData:
    t: np.ndarray
    p: np.ndarray
    q: np.ndarray


def load_trajectory_csv(path: str | Path) -> TrajectoryData:
    """Read a trajectory CSV with columns t, px, py, pz, qw, qx, qy, qz."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return TrajectoryData(t=data[:, 0], p=data[:, 1:4], q=data[:, 4:8])


def write_metrics_json(path: str | Path, metrics: dict) -> None:
    def _default(obj):
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, (np.floating, np.integer)):
            return obj.item()
        raise TypeError(f"not JSON serializable: {type(obj)}")

    Path(path).write_text(json.dumps(metrics, indent=2, default=_default))
