"""Panoramic LiDAR sensor model.

Sensor frame: x right, y down, z forward.  Azimuth ``phi = atan2(x, z)`` lies in
(-pi, pi]; inclination ``theta`` is measured from the -y axis, so ``theta = 0``
points straight up and ``theta = pi/2`` is horizontal.  Image row ``eta = 0``
corresponds to ``theta = vfov_min`` (the top scanline) and column ``xi = 0`` to
``phi = -pi``; columns ``0`` and ``W`` are the same azimuth.

Pixels are sampled at their centres, ``(xi + 0.5, eta + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

AXIS_EPS = 1e-12


class DegenerateProjection(ValueError):
    """Point lies on the sensor's vertical axis where azimuth is undefined."""


class RayAngles(NamedTuple):
    phi: np.ndarray | float
    theta: np.ndarray | float


def check_rigid(pose: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise ValueError(f"pose must be 4x4, got {pose.shape}")
    rot = pose[:3, :3]
    if np.linalg.norm(rot.T @ rot - np.eye(3)) > tol or np.linalg.det(rot) < 0:
        raise ValueError("pose rotation block is not a proper rotation")
    if np.any(pose[3] != (0.0, 0.0, 0.0, 1.0)):
        raise ValueError("pose last row must be (0, 0, 0, 1)")
    return pose


def invert_rigid(pose: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    rot = pose[:3, :3]
    out[:3, :3] = rot.T
    out[:3, 3] = -rot.T @ pose[:3, 3]
    return out


@dataclass
class SensorModel:
    """Intrinsics of a spinning LiDAR plus the world-to-sensor pose of one frame."""

    width: int
    height: int
    vfov_min: float
    vfov_max: float
    max_range: float = 80.0
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("sensor image must be non-empty")
        if not 0.0 <= self.vfov_min < self.vfov_max <= math.pi:
            raise ValueError("need 0 <= vfov_min < vfov_max <= pi")
        self.pose = check_rigid(self.pose)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def vfov_span(self) -> float:
        return self.vfov_max - self.vfov_min

    @property
    def origin(self) -> np.ndarray:
        """Sensor position in world coordinates."""
        return invert_rigid(self.pose)[:3, 3]

    def with_pose(self, pose: np.ndarray) -> SensorModel:
        return replace(self, pose=np.array(pose, dtype=np.float64))

    @classmethod
    def from_degrees(cls, width: int, height: int, elev_max_deg: float, elev_min_deg: float,
                     **kw) -> SensorModel:
        """Build from elevation limits in degrees (positive = above the horizon)."""
        return cls(width, height, math.radians(90.0 - elev_max_deg),
                   math.radians(90.0 - elev_min_deg), **kw)

    def intrinsics(self) -> dict:
        return {"width": self.width, "height": self.height, "vfov_min": self.vfov_min,
                "vfov_max": self.vfov_max, "max_range": self.max_range}


def pixel_to_angles(xi, eta, sensor: SensorModel) -> RayAngles:
    """Continuous pixel coordinates to ray angles (uniform beam model)."""
    xi = np.asarray(xi, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if np.any(xi < 0) or np.any(xi > sensor.width) or np.any(eta < 0) or np.any(eta > sensor.height):
        raise ValueError("pixel coordinate outside the image")
    phi = (2.0 * xi - sensor.width) * math.pi / sensor.width
    theta = eta / sensor.height * sensor.vfov_span + sensor.vfov_min
    return RayAngles(_scalar(phi), _scalar(theta))


def angles_to_pixel(a: RayAngles, sensor: SensorModel) -> tuple:
    """Exact algebraic inverse of :func:`pixel_to_angles`."""
    phi = np.asarray(a.phi, dtype=np.float64)
    theta = np.asarray(a.theta, dtype=np.float64)
    xi = (phi / math.pi * sensor.width + sensor.width) / 2.0
    eta = (theta - sensor.vfov_min) / sensor.vfov_span * sensor.height
    return _scalar(xi), _scalar(eta)


def angles_to_dir(a: RayAngles) -> np.ndarray:
    phi = np.asarray(a.phi, dtype=np.float64)
    theta = np.asarray(a.theta, dtype=np.float64)
    st = np.sin(theta)
    return np.stack([st * np.sin(phi), -np.cos(theta), st * np.cos(phi)], axis=-1)


def dir_to_angles(p) -> RayAngles:
    """Angles of a (not necessarily unit) direction; ``atan2(0, 0)`` is pinned to 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(np.linalg.norm(p, axis=-1) == 0.0):
        raise ValueError("cannot take angles of the zero vector")
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    on_axis = (x == 0.0) & (z == 0.0)
    phi = np.where(on_axis, 0.0, np.arctan2(x, z))
    phi = np.where(phi <= -math.pi, math.pi, phi)
    theta = np.arctan2(np.hypot(x, z), -y)
    return RayAngles(_scalar(phi), _scalar(theta))


def ray_planes(a: RayAngles) -> tuple[np.ndarray, np.ndarray]:
    """Two orthogonal homogeneous planes whose intersection is the ray."""
    phi = np.asarray(a.phi, dtype=np.float64)
    theta = np.asarray(a.theta, dtype=np.float64)
    zero = np.zeros_like(phi + theta)
    cp, sp = np.cos(phi) + zero, np.sin(phi) + zero
    ct, st = np.cos(theta) + zero, np.sin(theta) + zero
    h_x = np.stack([cp, zero, -sp, zero], axis=-1)
    h_y = np.stack([ct * sp, st, ct * cp, zero], axis=-1)
    return h_x, h_y


def pixel_centers(sensor: SensorModel) -> RayAngles:
    """Angles of every pixel centre as ``(H, W)`` arrays."""
    xi = np.arange(sensor.width) + 0.5
    eta = np.arange(sensor.height) + 0.5
    grid_xi, grid_eta = np.meshgrid(xi, eta)
    return pixel_to_angles(grid_xi, grid_eta, sensor)


def ray_directions(sensor: SensorModel) -> np.ndarray:
    """Unit ray direction per pixel in the sensor frame, shape ``(H, W, 3)``."""
    return angles_to_dir(pixel_centers(sensor))


def project_to_pixel(p, sensor: SensorModel) -> tuple:
    """Continuous pixel coordinates of sensor-frame points."""
    return angles_to_pixel(dir_to_angles(p), sensor)


def pano_jacobian(p, sensor: SensorModel, eps_axis: float = AXIS_EPS) -> np.ndarray:
    """Jacobian of the point-to-pixel map ``d(xi, eta) / d(x, y, z)``, shape (2, 3)."""
    x, y, z = (float(c) for c in np.asarray(p, dtype=np.float64))
    rho2 = x * x + z * z
    if rho2 <= eps_axis:
        raise DegenerateProjection("point too close to the vertical axis")
    rho = math.sqrt(rho2)
    r2 = rho2 + y * y
    w_t = sensor.width / (2.0 * math.pi)
    h_t = sensor.height / sensor.vfov_span
    return np.array([
        [w_t * z / rho2, 0.0, -w_t * x / rho2],
        [-h_t * x * y / (rho * r2), h_t * rho / r2, -h_t * y * z / (rho * r2)],
    ])


def _scalar(a):
    return float(a) if np.ndim(a) == 0 else a
