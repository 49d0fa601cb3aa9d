"""3D Gaussian baseline: splatting through the linearised panoramic projection.

Each Gaussian is projected with the Jacobian of the point-to-pixel map at its
centre, so its footprint is an image-space ellipse and its depth a single
constant ``|mu|``.  This is the approximation the exact ray/splat path avoids;
it is forward-only and exists for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .panocam import (DegenerateProjection, SensorModel, angles_to_pixel, dir_to_angles,
                      pano_jacobian)
from .raster import RasterConfig, RenderOutput
from .scene import Scene, pvg_opacity_at, pvg_position_at, sigmoid
from .sh import sh_basis

EPS_COV = 0.3  # px^2 added to the projected covariance diagonal


@dataclass
class Splat3D:
    mu: np.ndarray
    cov: np.ndarray
    opacity: float
    intensity_sh: np.ndarray
    raydrop_sh: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        self.cov = np.asarray(self.cov, dtype=np.float64).reshape(3, 3)
        if not np.allclose(self.cov, self.cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(self.cov).min() < -1e-12:
            raise ValueError("covariance must be positive semi-definite")


@dataclass
class Scene3D:
    """Static 3D Gaussians as parallel arrays plus the ray-drop prior."""

    mu: np.ndarray
    cov: np.ndarray
    opacity: np.ndarray
    intensity_sh: np.ndarray
    raydrop_sh: np.ndarray
    prior_logit: np.ndarray

    def __len__(self) -> int:
        return len(self.mu)

    def splat(self, i: int) -> Splat3D:
        return Splat3D(self.mu[i], self.cov[i], float(self.opacity[i]),
                       self.intensity_sh[i], self.raydrop_sh[i])

    @classmethod
    def from_scene(cls, scene: Scene, t: float, thickness: float = 0.0) -> Scene3D:
        """Freeze a 2D-splat scene at time ``t`` into flat 3D Gaussians.

        Covariance is ``s_u^2 t_u t_u^T + s_v^2 t_v t_v^T + thickness^2 n n^T``.
        """
        s = scene.scale
        n = np.cross(scene.tu, scene.tv)
        cov = (s[:, 0, None, None] ** 2 * scene.tu[:, :, None] * scene.tu[:, None, :]
               + s[:, 1, None, None] ** 2 * scene.tv[:, :, None] * scene.tv[:, None, :]
               + thickness ** 2 * n[:, :, None] * n[:, None, :])
        return cls(mu=pvg_position_at(scene, t, scene.cycle_length), cov=cov,
                   opacity=np.asarray(pvg_opacity_at(scene, t), dtype=np.float64),
                   intensity_sh=scene.intensity_sh.copy(), raydrop_sh=scene.raydrop_sh.copy(),
                   prior_logit=scene.prior_logit.copy())


def project_gaussian_3d(splat: Splat3D, pose, sensor: SensorModel):
    """Image-space covariance ``J R Sigma R^T J^T`` and continuous pixel centre.

    Raises :class:`DegenerateProjection` when the centre lies on the vertical axis.
    """
    pose = np.asarray(pose, dtype=np.float64)
    rot = pose[:3, :3]
    c = rot @ splat.mu + pose[:3, 3]
    jac = pano_jacobian(c, sensor)
    m = jac @ rot
    cov2 = m @ splat.cov @ m.T
    xi, eta = angles_to_pixel(dir_to_angles(c), sensor)
    return 0.5 * (cov2 + cov2.T), np.array([xi, eta])


@njit(cache=True)
def _blend_kernel(order, center, conic, radius, depth, opac, lam, rho, H, W,
                  cutoff_sq, alpha_min, alpha_max, t_min,
                  T, mean, median, inten, pgs, acc, dist_a, dist_c):
    for k in order:
        cx = center[k, 0]
        cy = center[k, 1]
        rad = radius[k]
        r0 = max(int(math.floor(cy - rad - 0.5)), 0)
        r1 = min(int(math.ceil(cy + rad - 0.5)), H - 1)
        if r0 > r1:
            continue
        span = int(math.ceil(2.0 * rad)) + 2
        if span >= W:
            c0 = 0
            c1 = W - 1
        else:
            c0 = int(math.floor(cx - rad - 0.5))
            c1 = int(math.ceil(cx + rad - 0.5))
        for row in range(r0, r1 + 1):
            dy = row + 0.5 - cy
            for cc in range(c0, c1 + 1):
                col = ((cc % W) + W) % W
                if T[row, col] < t_min:
                    continue
                dx = col + 0.5 - cx
                # shortest azimuth offset on the cyclic image
                dx -= W * math.floor(dx / W + 0.5)
                q = conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy
                if q > cutoff_sq:
                    continue
                a = opac[k] * math.exp(-0.5 * q)
                if a <= alpha_min:
                    continue
                alpha = min(a, alpha_max)
                t_before = T[row, col]
                w = alpha * t_before
                r = depth[k]
                mean[row, col] += w * r
                inten[row, col] += w * lam[k]
                pgs[row, col] += w * rho[k]
                dist_a[row, col] += w
                dist_c[row, col] += w * r * r
                if t_before > 0.5:
                    median[row, col] = r
                T[row, col] = t_before * (1.0 - alpha)
    for row in range(H):
        for col in range(W):
            acc[row, col] = 1.0 - T[row, col]


def render_baseline(scene3d: Scene3D, sensor: SensorModel,
                    config: RasterConfig | None = None) -> RenderOutput:
    """Forward render of 3D Gaussians with per-splat constant depth ``|mu|``.

    Splats are composited front to back in order of centre distance.  The SH
    channels are evaluated once per splat along the direction to its centre.
    """
    config = config or RasterConfig()
    H, W = sensor.shape
    pose = sensor.pose
    rot = pose[:3, :3]
    n = len(scene3d)
    centers = np.zeros((n, 2))
    conic = np.zeros((n, 3))
    radius = np.zeros(n)
    depth = np.zeros(n)
    keep = np.zeros(n, dtype=bool)
    local = scene3d.mu @ rot.T + pose[:3, 3]
    for k in range(n):
        if scene3d.opacity[k] < config.alpha_min:
            continue
        try:
            cov2, ctr = project_gaussian_3d(scene3d.splat(k), pose, sensor)
        except DegenerateProjection:
            continue
        cov2 = cov2 + EPS_COV * np.eye(2)
        det = cov2[0, 0] * cov2[1, 1] - cov2[0, 1] ** 2
        if not det > 0:
            continue
        conic[k] = [cov2[1, 1] / det, -cov2[0, 1] / det, cov2[0, 0] / det]
        lmax = 0.5 * (cov2[0, 0] + cov2[1, 1]) + math.sqrt(
            0.25 * (cov2[0, 0] - cov2[1, 1]) ** 2 + cov2[0, 1] ** 2)
        radius[k] = math.sqrt(config.cutoff_sq * lmax)
        centers[k] = ctr
        depth[k] = float(np.linalg.norm(local[k]))
        keep[k] = depth[k] > config.eps_near
    idx = np.flatnonzero(keep)
    order = idx[np.argsort(depth[idx], kind="stable")]

    dirs_c = local / np.maximum(np.linalg.norm(local, axis=1, keepdims=True), 1e-12)
    basis = sh_basis(dirs_c) if n else np.zeros((0, scene3d.intensity_sh.shape[1]))
    lam = np.sum(basis * scene3d.intensity_sh, axis=1)
    rho = np.clip(np.sum(basis * scene3d.raydrop_sh, axis=1), 0.0, 1.0)

    T = np.ones((H, W))
    mean = np.zeros((H, W))
    median = np.zeros((H, W))
    inten = np.zeros((H, W))
    pgs = np.zeros((H, W))
    acc = np.zeros((H, W))
    dist_a = np.zeros((H, W))
    dist_c = np.zeros((H, W))
    _blend_kernel(order.astype(np.int64), centers, conic, radius, depth,
                  np.asarray(scene3d.opacity, dtype=np.float64), lam, rho, H, W,
                  config.cutoff_sq, config.alpha_min, config.alpha_max, config.t_min,
                  T, mean, median, inten, pgs, acc, dist_a, dist_c)
    prior = sigmoid(scene3d.prior_logit)
    return RenderOutput(
        mean_depth=mean,
        median_depth=median,
        intensity=inten,
        raydrop_gs=pgs,
        raydrop=prior + (1.0 - prior) * pgs,
        normal=np.zeros((H, W, 3)),
        accum_alpha=acc,
        distort_A=dist_a,
        distort_B=mean.copy(),
        distort_C=dist_c,
        normal_sum=np.zeros((H, W, 3)),
    )
