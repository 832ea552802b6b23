"""Pinhole camera with radial-tangential distortion and reprojection chains."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import Pose, quat_to_rot, skew

_MIN_DEPTH = 1e-6


class PointBehindCamera(Exception):
    pass


@dataclass
class CameraModel:
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
    # T_CS maps sensor (IMU) frame coordinates into the camera frame.
    T_CS: Pose = field(default_factory=Pose.identity)

    def distort(self, xn: np.ndarray) -> np.ndarray:
        """Apply radtan distortion to ideal image-plane points (..., 2)."""
        x, y = xn[..., 0], xn[..., 1]
        r2 = x * x + y * y
        rad = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        xd = x * rad + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x)
        yd = y * rad + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y
        return np.stack([xd, yd], axis=-1)

    def project(self, m_C: np.ndarray) -> np.ndarray:
        """Project one camera-frame point to pixels; raises behind the camera."""
        if m_C[2] <= _MIN_DEPTH:
            raise PointBehindCamera(f"depth {m_C[2]:.3g}")
        xn = np.asarray(m_C[:2]) / m_C[2]
        xd = self.distort(xn)
        return np.array([self.fx * xd[0] + self.cx, self.fy * xd[1] + self.cy])

    def project_many(self, m_C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project (N, 3) camera-frame points.

        Returns (uv, valid) where valid requires positive depth and the pixel
        inside the image bounds.
        """
        z = m_C[:, 2]
        front = z > _MIN_DEPTH
        zsafe = np.where(front, z, 1.0)
        xn = m_C[:, :2] / zsafe[:, None]
        xd = self.distort(xn)
        uv = np.empty_like(xd)
        uv[:, 0] = self.fx * xd[:, 0] + self.cx
        uv[:, 1] = self.fy * xd[:, 1] + self.cy
        inside = (
            (uv[:, 0] >= 0.0)
            & (uv[:, 0] <= self.width - 1.0)
            & (uv[:, 1] >= 0.0)
            & (uv[:, 1] <= self.height - 1.0)
        )
        return uv, front & inside

    def in_image(self, uv: np.ndarray) -> bool:
        return bool(
            0.0 <= uv[0] <= self.width - 1.0 and 0.0 <= uv[1] <= self.height - 1.0
        )

    def unproject(self, uv: np.ndarray, iters: int = 10) -> np.ndarray:
        """Ideal (undistorted) image-plane coordinates for a pixel.

        Newton iteration on the distortion map; exact for a distortion-free
        camera after the first step.
        """
        target = np.array(
            [(uv[0] - self.cx) / self.fx, (uv[1] - self.cy) / self.fy]
        )
        xn = target.copy()
        for _ in range(iters):
            J = self._distort_jacobian(xn[None, :])[0]
            err = self.distort(xn) - target
            if np.linalg.norm(err) < 1e-14:
                break
            xn = xn - np.linalg.solve(J, err)
        return xn

    def _distort_jacobian(self, xn: np.ndarray) -> np.ndarray:
        """d distort / d xn for (N, 2) points, returned as (N, 2, 2)."""
        x, y = xn[:, 0], xn[:, 1]
        r2 = x * x + y * y
        rad = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        drad = 2.0 * self.k1 + 4.0 * self.k2 * r2
        J = np.empty((xn.shape[0], 2, 2))
        J[:, 0, 0] = rad + x * x * drad + 2.0 * self.p1 * y + 6.0 * self.p2 * x
        J[:, 0, 1] = x * y * drad + 2.0 * self.p1 * x + 2.0 * self.p2 * y
        J[:, 1, 0] = x * y * drad + 2.0 * self.p2 * y + 2.0 * self.p1 * x
        J[:, 1, 1] = rad + y * y * drad + 6.0 * self.p1 * y + 2.0 * self.p2 * x
        return J

    def projection_jacobian(self, m_C: np.ndarray) -> np.ndarray:
        return self.projection_jacobian_many(np.asarray(m_C)[None, :])[0]

    def projection_jacobian_many(self, m_C: np.ndarray) -> np.ndarray:
        """d pixel / d camera-frame point for (N, 3) points, as (N, 2, 3)."""
        x, y, z = m_C[:, 0], m_C[:, 1], m_C[:, 2]
        inv_z = 1.0 / z
        xn = m_C[:, :2] * inv_z[:, None]
        Jd = self._distort_jacobian(xn)
        # d xn / d m_C
        Jn = np.zeros((m_C.shape[0], 2, 3))
        Jn[:, 0, 0] = inv_z
        Jn[:, 1, 1] = inv_z
        Jn[:, 0, 2] = -x * inv_z * inv_z
        Jn[:, 1, 2] = -y * inv_z * inv_z
        J = np.einsum("nij,njk->nik", Jd, Jn)
        J[:, 0, :] *= self.fx
        J[:, 1, :] *= self.fy
        return J


def world_to_camera(T_MS: Pose, cam: CameraModel) -> Pose:
    """T_CM: map-frame coordinates into the camera frame."""
    return cam.T_CS @ T_MS.inverse()


def reprojection_chain(
    T_MS: Pose, m_M: np.ndarray, cam: CameraModel
) -> tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    """Project a map point through an agent pose.

    Returns (uv, J_pose, J_point, valid) with projection-oriented Jacobians:
    J_pose is d uv / d [rotation tangent, translation] of T_MS (2x6) and
    J_point is d uv / d m_M (2x3).
    """
    R_MS = quat_to_rot(T_MS.q)
    m_S = R_MS.T @ (m_M - T_MS.p)
    R_CS = quat_to_rot(cam.T_CS.q)
    m_C = R_CS @ m_S + cam.T_CS.p
    if m_C[2] <= _MIN_DEPTH:
        return np.zeros(2), np.zeros((2, 6)), np.zeros((2, 3)), False
    uv = cam.project(m_C)
    Jpi = cam.projection_jacobian(m_C)
    J_point = Jpi @ R_CS @ R_MS.T
    J_pose = np.empty((2, 6))
    J_pose[:, :3] = Jpi @ R_CS @ skew(m_S)
    J_pose[:, 3:] = -J_point
    return uv, J_pose, J_point, cam.in_image(uv)


def reprojection_chain_many(
    T_MS: Pose, m_M: np.ndarray, cam: CameraModel
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized reprojection_chain over (N, 3) map points."""
    R_MS = quat_to_rot(T_MS.q)
    R_CS = quat_to_rot(cam.T_CS.q)
    m_S = (m_M - T_MS.p) @ R_MS
    m_C = m_S @ R_CS.T + cam.T_CS.p
    uv, valid = cam.project_many(m_C)
    safe = m_C.copy()
    safe[:, 2] = np.where(m_C[:, 2] > _MIN_DEPTH, m_C[:, 2], 1.0)
    Jpi = cam.projection_jacobian_many(safe)
    J_point = np.einsum("nij,jk->nik", Jpi, R_CS @ R_MS.T)
    # skew(m_S) batched: columns assembled from cross products.
    S = np.zeros((m_S.shape[0], 3, 3))
    S[:, 0, 1] = -m_S[:, 2]
    S[:, 0, 2] = m_S[:, 1]
    S[:, 1, 0] = m_S[:, 2]
    S[:, 1, 2] = -m_S[:, 0]
    S[:, 2, 0] = -m_S[:, 1]
    S[:, 2, 1] = m_S[:, 0]
    J_rot = np.einsum("nij,jk,nkl->nil", Jpi, R_CS, S)
    J_pose = np.concatenate([J_rot, -J_point], axis=2)
    return uv, J_pose, J_point, valid
