"""Periodic-vibration 2D Gaussian splats and the scene container.

A splat is a flat elliptical Gaussian disk.  Its centre oscillates along a
learned direction and its opacity fades away from a learned life peak, so a
collection of mostly-static splats can hand motion off to one another.

The scene stores primitives as parallel arrays (one row per splat).  A single
:class:`SplatPrimitive` view is available for per-splat work and tests; the
time-dependent helpers accept either.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.spatial import cKDTree

from .sh import SH_COUNT, dc_for_value

# Field name -> trailing shape, in serialisation order.
PARAM_SHAPES: dict[str, tuple[int, ...]] = {
    "mu": (3,),
    "tu": (3,),
    "tv": (3,),
    "log_scale": (2,),
    "opacity_raw": (),
    "vib_dir": (3,),
    "life_peak": (),
    "decay_rate_raw": (),
    "intensity_sh": (SH_COUNT,),
    "raydrop_sh": (SH_COUNT,),
}
PARAM_FIELDS = tuple(PARAM_SHAPES)
PARAM_WIDTH = sum(int(np.prod(s)) if s else 1 for s in PARAM_SHAPES.values())


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class SplatPrimitive:
    """One splat.  Scales, opacity and decay rate are stored unconstrained."""

    mu: np.ndarray
    tu: np.ndarray
    tv: np.ndarray
    log_scale: np.ndarray
    opacity_raw: float
    vib_dir: np.ndarray
    life_peak: float
    decay_rate_raw: float
    intensity_sh: np.ndarray
    raydrop_sh: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_raw))

    @property
    def beta(self) -> float:
        return float(np.exp(self.decay_rate_raw))


@dataclass
class Scene:
    """All splats plus the scene-level cycle length and ray-drop prior.

    ``prior_logit`` is the per-pixel ray-drop prior in logit space and must match
    the sensor image shape.  ``time_range`` is the (start, end) of the training
    sequence; pruning uses it to find each splat's peak opacity.
    """

    mu: np.ndarray
    tu: np.ndarray
    tv: np.ndarray
    log_scale: np.ndarray
    opacity_raw: np.ndarray
    vib_dir: np.ndarray
    life_peak: np.ndarray
    decay_rate_raw: np.ndarray
    intensity_sh: np.ndarray
    raydrop_sh: np.ndarray
    cycle_length: float
    prior_logit: np.ndarray
    time_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        n = len(self.mu)
        for name, shape in PARAM_SHAPES.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n,) + shape:
                raise ValueError(f"{name}: expected shape {(n,) + shape}, got {arr.shape}")
            setattr(self, name, arr)
        self.prior_logit = np.ascontiguousarray(self.prior_logit, dtype=np.float64)
        if self.prior_logit.ndim != 2:
            raise ValueError("prior_logit must be an H x W map")
        if not self.cycle_length > 0:
            raise ValueError("cycle_length must be positive")
        self.time_range = (float(self.time_range[0]), float(self.time_range[1]))

    def __len__(self) -> int:
        return len(self.mu)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_raw)

    @property
    def beta(self) -> np.ndarray:
        return np.exp(self.decay_rate_raw)

    @property
    def raydrop_prior(self) -> np.ndarray:
        return sigmoid(self.prior_logit)

    def params(self) -> dict[str, np.ndarray]:
        """Learnable arrays keyed by field name (live references, not copies)."""
        out = {name: getattr(self, name) for name in PARAM_FIELDS}
        out["prior_logit"] = self.prior_logit
        return out

    def primitive(self, i: int) -> SplatPrimitive:
        kw = {}
        for name, shape in PARAM_SHAPES.items():
            value = getattr(self, name)[i]
            kw[name] = float(value) if shape == () else value.copy()
        return SplatPrimitive(**kw)

    def copy(self) -> Scene:
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        for name in PARAM_FIELDS + ("prior_logit",):
            kw[name] = kw[name].copy()
        return Scene(**kw)

    def subset(self, keep: np.ndarray) -> Scene:
        """New scene with only the rows selected by ``keep`` (order preserved)."""
        kw = {name: getattr(self, name)[keep].copy() for name in PARAM_FIELDS}
        return replace(self, **kw, prior_logit=self.prior_logit.copy())

    @classmethod
    def from_primitives(
        cls,
        prims: list[SplatPrimitive],
        cycle_length: float,
        prior_logit: np.ndarray,
        time_range: tuple[float, float] = (0.0, 1.0),
    ) -> Scene:
        kw = {}
        for name, shape in PARAM_SHAPES.items():
            rows = [np.asarray(getattr(p, name), dtype=np.float64) for p in prims]
            kw[name] = np.array(rows, dtype=np.float64).reshape((len(prims),) + shape)
        return cls(**kw, cycle_length=cycle_length, prior_logit=prior_logit,
                   time_range=time_range)

    def pack(self) -> np.ndarray:
        """Per-primitive parameter block, shape ``(N, PARAM_WIDTH)``."""
        cols = [getattr(self, name).reshape(len(self), -1) for name in PARAM_FIELDS]
        return np.concatenate(cols, axis=1) if cols else np.zeros((0, PARAM_WIDTH))

    @classmethod
    def unpack(cls, block: np.ndarray, **kw) -> Scene:
        n = block.shape[0]
        arrays, col = {}, 0
        for name, shape in PARAM_SHAPES.items():
            width = int(np.prod(shape)) if shape else 1
            arrays[name] = block[:, col:col + width].reshape((n,) + shape).copy()
            col += width
        return cls(**arrays, **kw)


def _vibration_phase(life_peak, t, l):
    return 2.0 * math.pi * (t - np.asarray(life_peak, dtype=np.float64)) / l


def pvg_position_at(prim, t: float, l: float) -> np.ndarray:
    """Centre at time ``t``: ``mu + l/(2 pi) sin(2 pi (t - tau) / l) v``."""
    if not l > 0:
        raise ValueError("cycle length must be positive")
    amp = l / (2.0 * math.pi) * np.sin(_vibration_phase(prim.life_peak, t, l))
    return np.asarray(prim.mu) + np.asarray(amp)[..., None] * np.asarray(prim.vib_dir)


def pvg_opacity_at(prim, t: float) -> np.ndarray | float:
    """Opacity at time ``t`` with Gaussian temporal decay around the life peak."""
    dt = t - np.asarray(prim.life_peak, dtype=np.float64)
    beta = np.exp(np.asarray(prim.decay_rate_raw, dtype=np.float64))
    value = sigmoid(prim.opacity_raw) * np.exp(-0.5 * dt * dt / (beta * beta))
    return float(value) if np.ndim(value) == 0 else value


def peak_opacity(scene: Scene, t0: float, t1: float) -> np.ndarray:
    """Maximum of the decayed opacity over ``[t0, t1]`` for every splat."""
    tau = scene.life_peak
    gap = np.where(tau < t0, t0 - tau, np.where(tau > t1, tau - t1, 0.0))
    beta = scene.beta
    return scene.opacity * np.exp(-0.5 * gap * gap / (beta * beta))


def splat_basis(prim, t: float, l: float) -> np.ndarray:
    """Homogeneous UV-to-world matrix, shape ``(..., 4, 3)``.

    Columns are ``(s_u t_u, 0)``, ``(s_v t_v, 0)`` and ``(mu(t), 1)``.
    """
    scale = np.exp(np.asarray(prim.log_scale, dtype=np.float64))
    centre = pvg_position_at(prim, t, l)
    lead = centre.shape[:-1]
    H = np.zeros(lead + (4, 3))
    H[..., :3, 0] = scale[..., 0:1] * np.asarray(prim.tu)
    H[..., :3, 1] = scale[..., 1:2] * np.asarray(prim.tv)
    H[..., :3, 2] = centre
    H[..., 3, 2] = 1.0
    return H


def orthonormalize(tu: np.ndarray, tv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gram-Schmidt on each (t_u, t_v) row pair, t_u first.  Works in place."""
    tu /= np.linalg.norm(tu, axis=-1, keepdims=True)
    tv -= np.sum(tv * tu, axis=-1, keepdims=True) * tu
    norm = np.linalg.norm(tv, axis=-1, keepdims=True)
    bad = norm[..., 0] < 1e-12
    if np.any(bad):
        # t_v collapsed onto t_u: pick any perpendicular direction.
        helper = np.where(np.abs(tu[bad, 0:1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
        fresh = np.cross(tu[bad], helper)
        tv[bad] = fresh
        norm[bad] = np.linalg.norm(fresh, axis=-1, keepdims=True)
    tv /= norm
    # A second pass removes the residual left by the first projection.
    tv -= np.sum(tv * tu, axis=-1, keepdims=True) * tu
    tv /= np.linalg.norm(tv, axis=-1, keepdims=True)
    return tu, tv


@dataclass
class InitConfig:
    """Knobs for building a scene from a LiDAR point cloud."""

    max_points: int = 20000
    knn: int = 3
    scale_min: float = 0.01
    scale_max: float = 1.0
    opacity: float = 0.1
    cycle_fraction: float = 0.2
    static_beta_factor: float = 10.0
    prior: float = 0.01
    image_shape: tuple[int, int] = (32, 256)
    time_range: tuple[float, float] = (0.0, 1.0)
    orientation: str = "random"
    pca_neighbors: int = 16
    life_mode: str = "static"
    life_beta: float = 0.2
    seed: int = 0


def init_from_pointcloud(points: np.ndarray, intensities: np.ndarray,
                         config: InitConfig | None = None,
                         sensor_origins: np.ndarray | None = None,
                         timestamps: np.ndarray | None = None) -> Scene:
    """One splat per (sub-sampled) point.

    Scales come from the mean distance to the ``knn`` nearest neighbours, clamped
    to ``[scale_min, scale_max]``.  Tangent frames are random unless
    ``orientation="facing"``, which turns each disk towards ``sensor_origins``
    (the position the point was observed from).  Every splat starts static: zero
    vibration and, with ``life_mode="static"``, a decay width of
    ``static_beta_factor`` sequence durations centred on the sequence midpoint.
    ``life_mode="observed"`` instead centres each splat's life on the
    ``timestamps`` entry of its point with decay width ``life_beta`` seconds.
    """
    config = config or InitConfig()
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    intensities = np.asarray(intensities, dtype=np.float64).reshape(-1)
    if len(points) == 0:
        raise ValueError("cannot initialise a scene from an empty point cloud")
    if len(intensities) != len(points):
        raise ValueError("one intensity per point is required")
    rng = np.random.default_rng(config.seed)
    if len(points) > config.max_points:
        idx = np.sort(rng.choice(len(points), size=config.max_points, replace=False))
        points, intensities = points[idx], intensities[idx]
        if sensor_origins is not None:
            sensor_origins = np.asarray(sensor_origins)[idx]
        if timestamps is not None:
            timestamps = np.asarray(timestamps)[idx]
    n = len(points)

    k = min(config.knn, n - 1)
    if k > 0:
        dist, _ = cKDTree(points).query(points, k=k + 1)
        dist = np.asarray(dist).reshape(n, k + 1)[:, 1:]
        s = dist.mean(axis=1)
    else:
        s = np.full(n, config.scale_max)
    s = np.clip(s, config.scale_min, config.scale_max)

    if config.orientation == "pca" and n >= 3:
        kp = min(config.pca_neighbors, n)
        _, nbr = cKDTree(points).query(points, k=kp)
        local = points[nbr] - points[nbr].mean(axis=1, keepdims=True)
        _, vecs = np.linalg.eigh(np.einsum("nki,nkj->nij", local, local))
        tu = vecs[:, :, 2].copy()
        tv = vecs[:, :, 1].copy()
    elif config.orientation == "facing" and sensor_origins is not None:
        normal = np.asarray(sensor_origins, dtype=np.float64) - points
        normal /= np.maximum(np.linalg.norm(normal, axis=1, keepdims=True), 1e-12)
        helper = np.where(np.abs(normal[:, 1:2]) < 0.9, [[0.0, 1.0, 0.0]], [[1.0, 0.0, 0.0]])
        tu = np.cross(helper, normal)
        tv = np.cross(normal, tu)
    elif config.orientation in ("random", "facing", "pca"):
        tu = rng.normal(size=(n, 3))
        tv = rng.normal(size=(n, 3))
    else:
        raise ValueError(f"unknown orientation mode {config.orientation!r}")
    tu, tv = orthonormalize(tu, tv)

    t0, t1 = config.time_range
    duration = t1 - t0 if t1 > t0 else 1.0
    if config.life_mode == "observed" and timestamps is not None:
        life_peak = np.asarray(timestamps, dtype=np.float64).reshape(n).copy()
        decay = np.full(n, math.log(config.life_beta))
    elif config.life_mode in ("static", "observed"):
        life_peak = np.full(n, 0.5 * (t0 + t1))
        decay = np.full(n, math.log(config.static_beta_factor * duration))
    else:
        raise ValueError(f"unknown life mode {config.life_mode!r}")
    sh_int = np.zeros((n, SH_COUNT))
    sh_int[:, 0] = dc_for_value(intensities)
    h, w = config.image_shape
    return Scene(
        mu=points.copy(),
        tu=tu,
        tv=tv,
        log_scale=np.log(np.stack([s, s], axis=1)),
        opacity_raw=np.full(n, float(logit(config.opacity))),
        vib_dir=np.zeros((n, 3)),
        life_peak=life_peak,
        decay_rate_raw=decay,
        intensity_sh=sh_int,
        raydrop_sh=np.zeros((n, SH_COUNT)),
        cycle_length=config.cycle_fraction * duration,
        prior_logit=np.full((h, w), float(logit(config.prior))),
        time_range=(t0, t1),
    )
