"""Closed-form ray/splat intersection.

A ray is the intersection of two planes through the sensor origin.  Pushing the
splat's UV-to-sensor map through both planes gives a 2x2 system in ``(u, v)``;
the hit distance then follows by projecting the hit point on the ray direction.
"""

from __future__ import annotations

import numpy as np

from .panocam import RayAngles, angles_to_dir

EPS_DET = 1e-8
EPS_NEAR = 0.05
CUTOFF_SQ = 9.0


def gaussian_weight(u, v):
    return np.exp(-0.5 * (np.asarray(u) ** 2 + np.asarray(v) ** 2))


def _system(h_x, h_y, pose, basis):
    rows = np.stack([np.asarray(h_x, dtype=np.float64), np.asarray(h_y, dtype=np.float64)])
    m = rows @ np.asarray(pose, dtype=np.float64) @ np.asarray(basis, dtype=np.float64)
    return m[:, :2], m[:, 2]


def ray_splat_intersect(h_x, h_y, pose, basis, eps_det: float = EPS_DET):
    """UV coordinates of the ray's hit on the splat plane, or ``None`` if edge-on."""
    R, h = _system(h_x, h_y, pose, basis)
    det = R[0, 0] * R[1, 1] - R[0, 1] * R[1, 0]
    if abs(det) < eps_det:
        return None
    u = -(R[1, 1] * h[0] - R[0, 1] * h[1]) / det
    v = -(-R[1, 0] * h[0] + R[0, 0] * h[1]) / det
    return float(u), float(v)


def intersect_depth(u: float, v: float, pose, basis, a: RayAngles,
                    eps_near: float = EPS_NEAR):
    """Distance from the sensor to the hit point, or ``None`` when too close or behind."""
    d = np.append(angles_to_dir(a), 0.0)
    r = float(d @ np.asarray(pose) @ np.asarray(basis) @ np.array([u, v, 1.0]))
    return r if r > eps_near else None


def intersect_batch(dirs, h_x, h_y, A, B, C, eps_det: float = EPS_DET):
    """Vectorised intersection in the sensor frame.

    ``A, B`` are the scaled tangent axes and ``C`` the centre of each splat, already
    expressed in the sensor frame; ray arrays and splat arrays broadcast against
    each other.  Returns ``(u, v, r, ok)`` with ``ok`` false for edge-on splats.
    """
    ax = np.sum(h_x * A, axis=-1)
    ay = np.sum(h_y * A, axis=-1)
    bx = np.sum(h_x * B, axis=-1)
    by = np.sum(h_y * B, axis=-1)
    cx = np.sum(h_x * C, axis=-1)
    cy = np.sum(h_y * C, axis=-1)
    det = ax * by - bx * ay
    ok = np.abs(det) >= eps_det
    safe = np.where(ok, det, 1.0)
    u = -(by * cx - bx * cy) / safe
    v = -(-ay * cx + ax * cy) / safe
    hit = A * u[..., None] + B * v[..., None] + C
    r = np.sum(dirs * hit, axis=-1)
    return u, v, r, ok


def to_sensor_frame(pose, A, B, C):
    """Rotate tangent axes and transform centres into the sensor frame."""
    rot = pose[:3, :3]
    return A @ rot.T, B @ rot.T, C @ rot.T + pose[:3, 3]
