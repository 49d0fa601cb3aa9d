"""Shared fixtures: random scenes, sensors and an untiled reference renderer."""

from __future__ import annotations

import math

import numpy as np
import pytest

from panosplat.panocam import SensorModel, ray_directions, ray_planes, pixel_centers
from panosplat.scene import Scene, orthonormalize, sigmoid
from panosplat.sh import sh_basis


def small_sensor(width=64, height=16, span=0.5) -> SensorModel:
    return SensorModel(width, height, math.pi / 2 - span, math.pi / 2 + span)


def random_scene(rng, n, hw=(16, 64), dist=(3.0, 6.0), scale=(0.5, 1.5), height=0.8,
                 seam=0, dynamic=True) -> Scene:
    """Random splats around the sensor; ``seam`` of them straddle azimuth +-pi."""
    ang = rng.uniform(-math.pi, math.pi, n)
    ang[:seam] = math.pi + rng.uniform(-0.05, 0.05, seam)
    d = rng.uniform(*dist, n)
    mu = np.stack([d * np.sin(ang), rng.uniform(-height, height, n), d * np.cos(ang)], 1)
    tu = rng.normal(size=(n, 3))
    tv = rng.normal(size=(n, 3))
    orthonormalize(tu, tv)
    vib = rng.normal(size=(n, 3)) * (0.3 if dynamic else 0.0)
    return Scene(
        mu=mu, tu=tu, tv=tv, log_scale=np.log(rng.uniform(*scale, (n, 2))),
        opacity_raw=rng.uniform(0.0, 2.0, n), vib_dir=vib,
        life_peak=rng.uniform(-0.2, 0.2, n), decay_rate_raw=np.log(rng.uniform(0.5, 1.0, n)),
        intensity_sh=rng.normal(size=(n, 9)) * 0.3,
        raydrop_sh=np.concatenate([rng.uniform(0.5, 2.5, (n, 1)),
                                   rng.normal(size=(n, 8)) * 0.2], 1),
        cycle_length=0.7, prior_logit=rng.normal(size=hw))


def brute_force_render(scene: Scene, t: float, sensor: SensorModel, t_min=1e-4,
                       alpha_min=1 / 255, alpha_max=0.995, cutoff_sq=9.0, eps_det=1e-8,
                       eps_near=0.05) -> dict:
    """Untiled reference: every pixel against every splat, generic 3x3 solves.

    Splats are visited in order of centre distance (ties by index); the hit
    point solves ``A u + B v + C = r d`` directly rather than through planes.
    """
    H, W = sensor.shape
    rot, trans = sensor.pose[:3, :3], sensor.pose[:3, 3]
    l = scene.cycle_length
    amp = l / (2 * math.pi) * np.sin(2 * math.pi * (t - scene.life_peak) / l)
    centre = (scene.mu + amp[:, None] * scene.vib_dir) @ rot.T + trans
    A = (scene.scale[:, 0:1] * scene.tu) @ rot.T
    B = (scene.scale[:, 1:2] * scene.tv) @ rot.T
    nrm = np.cross(scene.tu, scene.tv) @ rot.T
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    opac = scene.opacity * np.exp(-0.5 * (t - scene.life_peak) ** 2 / scene.beta ** 2)

    d = ray_directions(sensor).reshape(-1, 3)
    h_x, h_y = ray_planes(pixel_centers(sensor))
    h_x = h_x.reshape(-1, 4)[:, :3]
    h_y = h_y.reshape(-1, 4)[:, :3]
    shb = sh_basis(d)
    P = len(d)
    T = np.ones(P)
    out = {k: np.zeros(P) for k in ("mean", "median", "inten", "pgs", "A", "C")}
    nsum = np.zeros((P, 3))
    order = np.lexsort((np.arange(len(scene)), np.linalg.norm(centre, axis=1)))
    for k in order:
        active = T >= t_min
        if not active.any():
            break
        # acceptance of edge-on splats follows the plane-pair determinant
        det = (h_x @ A[k]) * (h_y @ B[k]) - (h_x @ B[k]) * (h_y @ A[k])
        ok = active & (np.abs(det) >= eps_det)
        M = np.zeros((P, 3, 3))
        M[:, :, 0] = A[k]
        M[:, :, 1] = B[k]
        M[:, :, 2] = -d
        M[~ok] = np.eye(3)
        sol = np.linalg.solve(M, np.broadcast_to(-centre[k], (P, 3))[..., None])[..., 0]
        u, v, r = sol[:, 0], sol[:, 1], sol[:, 2]
        q = u * u + v * v
        a = opac[k] * np.exp(-0.5 * q)
        ok &= (q <= cutoff_sq) & (r > eps_near) & (a > alpha_min)
        alpha = np.where(ok, np.minimum(a, alpha_max), 0.0)
        w = alpha * T
        lam = shb @ scene.intensity_sh[k]
        rho = np.clip(shb @ scene.raydrop_sh[k], 0.0, 1.0)
        sgn = np.where(d @ nrm[k] > 0, -1.0, 1.0)
        r = np.where(ok, r, 0.0)
        out["mean"] += w * r
        out["inten"] += w * lam
        out["pgs"] += w * rho
        out["A"] += w
        out["C"] += w * r * r
        nsum += (w * sgn)[:, None] * nrm[k]
        out["median"] = np.where(ok & (T > 0.5), r, out["median"])
        T = T * (1.0 - alpha)
    res = {k: v.reshape(H, W) for k, v in out.items()}
    res["acc"] = (1.0 - T).reshape(H, W)
    res["nsum"] = nsum.reshape(H, W, 3)
    prior = sigmoid(scene.prior_logit)
    res["raydrop"] = prior + (1 - prior) * res["pgs"]
    return res


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
