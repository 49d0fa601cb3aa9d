"""Tile-based panoramic rasteriser with an analytic backward pass.

Splats are binned into 16x16 pixel tiles by a conservative angular bound,
sorted per tile by centre distance, then blended front to back along each
pixel's ray using the exact ray/disk intersection for alpha and depth.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import _kernels as K
from .intersect import CUTOFF_SQ, EPS_DET, EPS_NEAR
from .panocam import SensorModel, angles_to_dir, pixel_centers, ray_planes
from .scene import PARAM_FIELDS, Scene, sigmoid
from .sh import sh_basis


@dataclass(frozen=True)
class RasterConfig:
    tile_size: int = 16
    t_min: float = 1e-4
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.995
    cutoff_sq: float = CUTOFF_SQ
    eps_det: float = EPS_DET
    eps_near: float = EPS_NEAR


@dataclass
class TileGrid:
    tile_size: int
    tiles_x: int
    tiles_y: int
    offsets: np.ndarray   # (tiles + 1,) start of each tile's slice in ``entries``
    entries: np.ndarray   # primitive index per entry, sorted within each tile
    keys: np.ndarray      # sort key (centre distance) per entry

    def tile(self, tx: int, ty: int) -> np.ndarray:
        t = ty * self.tiles_x + tx
        return self.entries[self.offsets[t]:self.offsets[t + 1]]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class RenderOutput:
    mean_depth: np.ndarray
    median_depth: np.ndarray
    intensity: np.ndarray
    raydrop_gs: np.ndarray
    raydrop: np.ndarray
    normal: np.ndarray
    accum_alpha: np.ndarray
    distort_A: np.ndarray
    distort_B: np.ndarray
    distort_C: np.ndarray
    normal_sum: np.ndarray = field(repr=False)
    context: RenderContext | None = field(default=None, repr=False)


@dataclass
class MapGrads:
    """Upstream gradients, one per output map.  ``None`` means zero."""

    mean_depth: np.ndarray | None = None
    median_depth: np.ndarray | None = None
    intensity: np.ndarray | None = None
    raydrop_gs: np.ndarray | None = None
    raydrop: np.ndarray | None = None
    normal: np.ndarray | None = None
    accum_alpha: np.ndarray | None = None
    distort_A: np.ndarray | None = None
    distort_B: np.ndarray | None = None
    distort_C: np.ndarray | None = None

    def __iadd__(self, other: MapGrads) -> MapGrads:
        for f in fields(self):
            theirs = getattr(other, f.name)
            if theirs is None:
                continue
            mine = getattr(self, f.name)
            setattr(self, f.name, theirs.copy() if mine is None else mine + theirs)
        return self


@dataclass
class GradientSet:
    """Gradients mirroring the scene's learnable arrays."""

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
    prior_logit: np.ndarray

    @classmethod
    def zeros_like(cls, scene: Scene) -> GradientSet:
        return cls(**{k: np.zeros_like(v) for k, v in scene.params().items()})

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def check_finite(self) -> None:
        for name in PARAM_FIELDS:
            arr = getattr(self, name)
            bad = ~np.isfinite(arr.reshape(len(arr), -1)).all(axis=1)
            if np.any(bad):
                raise FloatingPointError(
                    f"non-finite gradient in {name} for primitive {int(np.flatnonzero(bad)[0])}")
        if not np.isfinite(self.prior_logit).all():
            raise FloatingPointError("non-finite gradient in the ray-drop prior")


@dataclass
class PreparedSplats:
    """Per-render splat state in the sensor frame plus what the chain rule needs."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    opac: np.ndarray
    nrm: np.ndarray
    ish: np.ndarray
    dsh: np.ndarray
    radius: np.ndarray
    # Chain-rule bookkeeping
    rot: np.ndarray
    scale: np.ndarray
    amp: np.ndarray
    phase_cos: np.ndarray
    dt: np.ndarray
    normal_world: np.ndarray
    cross_norm: np.ndarray


@dataclass
class RenderContext:
    scene: Scene
    t: float
    sensor: SensorModel
    config: RasterConfig
    prep: PreparedSplats
    grid: TileGrid
    med_entry: np.ndarray
    n_proc: np.ndarray
    prior: np.ndarray
    raydrop_gs: np.ndarray
    normal_sum: np.ndarray


@functools.lru_cache(maxsize=16)
def _ray_table_cached(width, height, vfov_min, vfov_max):
    sensor = SensorModel(width, height, vfov_min, vfov_max)
    angles = pixel_centers(sensor)
    dirs = angles_to_dir(angles)
    h_x, h_y = ray_planes(angles)
    table = (np.ascontiguousarray(dirs), np.ascontiguousarray(h_x[..., :3]),
             np.ascontiguousarray(h_y[..., :3]), np.ascontiguousarray(sh_basis(dirs)))
    for arr in table:
        arr.setflags(write=False)
    return table


def ray_table(sensor: SensorModel):
    """Per-pixel ray direction, plane normals and SH basis for a sensor."""
    return _ray_table_cached(sensor.width, sensor.height, sensor.vfov_min, sensor.vfov_max)


def prepare_splats(scene: Scene, t: float, pose: np.ndarray) -> PreparedSplats:
    rot = pose[:3, :3]
    scale = scene.scale
    l = scene.cycle_length
    phase = 2.0 * math.pi * (t - scene.life_peak) / l
    amp = l / (2.0 * math.pi) * np.sin(phase)
    centre = scene.mu + amp[:, None] * scene.vib_dir
    a_world = scale[:, 0:1] * scene.tu
    b_world = scale[:, 1:2] * scene.tv
    cross = np.cross(scene.tu, scene.tv)
    cross_norm = np.linalg.norm(cross, axis=1)
    normal_world = cross / np.maximum(cross_norm, 1e-300)[:, None]
    dt = t - scene.life_peak
    beta = scene.beta
    opac = scene.opacity * np.exp(-0.5 * dt * dt / (beta * beta))
    return PreparedSplats(
        A=np.ascontiguousarray(a_world @ rot.T),
        B=np.ascontiguousarray(b_world @ rot.T),
        C=np.ascontiguousarray(centre @ rot.T + pose[:3, 3]),
        opac=np.ascontiguousarray(opac),
        nrm=np.ascontiguousarray(normal_world @ rot.T),
        ish=scene.intensity_sh,
        dsh=scene.raydrop_sh,
        radius=3.0 * scale.max(axis=1) if len(scene) else np.zeros(0),
        rot=rot,
        scale=scale,
        amp=amp,
        phase_cos=np.cos(phase),
        dt=dt,
        normal_world=normal_world,
        cross_norm=cross_norm,
    )


def _bin_prepared(prep: PreparedSplats, sensor: SensorModel, config: RasterConfig) -> TileGrid:
    ts = config.tile_size
    W, H = sensor.width, sensor.height
    tiles_x = (W + ts - 1) // ts
    tiles_y = (H + ts - 1) // ts
    tile_ids, prims = K.bin_kernel(prep.C, prep.radius, prep.opac, config.alpha_min,
                                   W, H, sensor.vfov_min, sensor.vfov_span, ts)
    dist = np.linalg.norm(prep.C, axis=1)
    keys = dist[prims]
    order = np.lexsort((prims, keys, tile_ids))
    tile_ids, prims, keys = tile_ids[order], prims[order], keys[order]
    counts = np.bincount(tile_ids, minlength=tiles_x * tiles_y)
    offsets = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return TileGrid(ts, tiles_x, tiles_y, offsets, np.ascontiguousarray(prims), keys)


def bin_splats(scene: Scene, t: float, sensor: SensorModel, tile_size: int = 16) -> TileGrid:
    """Assign splats to every tile their 3-sigma disk may touch.

    The bound is a cone of half-angle ``asin(3 max(s) / d)`` around the centre
    direction, padded by one pixel; azimuth wraps around the image seam.
    Splats whose decayed opacity is below 1/255 are skipped.
    """
    config = RasterConfig(tile_size=tile_size)
    return _bin_prepared(prepare_splats(scene, t, sensor.pose), sensor, config)


def render(scene: Scene, t: float, sensor: SensorModel, config: RasterConfig | None = None,
           retain: bool = False) -> RenderOutput:
    """Render every LiDAR channel of ``scene`` at time ``t`` from ``sensor.pose``."""
    config = config or RasterConfig()
    H, W = sensor.shape
    if scene.prior_logit.shape != (H, W):
        raise ValueError(f"ray-drop prior is {scene.prior_logit.shape}, sensor is {(H, W)}")
    prep = prepare_splats(scene, t, sensor.pose)
    grid = _bin_prepared(prep, sensor, config)
    dirs, h_x, h_y, shb = ray_table(sensor)

    mean = np.zeros((H, W))
    median = np.zeros((H, W))
    inten = np.zeros((H, W))
    pgs = np.zeros((H, W))
    nsum = np.zeros((H, W, 3))
    acc = np.zeros((H, W))
    dist_a = np.zeros((H, W))
    dist_c = np.zeros((H, W))
    med_entry = np.full((H, W), -1, dtype=np.int64)
    n_proc = np.zeros((H, W), dtype=np.int64)
    K.render_kernel(prep.A, prep.B, prep.C, prep.opac, prep.nrm, prep.ish, prep.dsh,
                    dirs, h_x, h_y, shb, grid.offsets, grid.entries, config.tile_size,
                    config.cutoff_sq, config.eps_det, config.eps_near, config.alpha_min,
                    config.alpha_max, config.t_min,
                    mean, median, inten, pgs, nsum, acc, dist_a, dist_c, med_entry, n_proc)

    prior = sigmoid(scene.prior_logit)
    norm = np.linalg.norm(nsum, axis=2, keepdims=True)
    normal = np.where(norm > 0, nsum / np.where(norm > 0, norm, 1.0), 0.0)
    out = RenderOutput(
        mean_depth=mean,
        median_depth=median,
        intensity=inten,
        raydrop_gs=pgs,
        raydrop=prior + (1.0 - prior) * pgs,
        normal=normal,
        accum_alpha=acc,
        distort_A=dist_a,
        distort_B=mean.copy(),
        distort_C=dist_c,
        normal_sum=nsum,
    )
    if retain:
        out.context = RenderContext(scene, t, sensor, config, prep, grid, med_entry, n_proc,
                                    prior, pgs, nsum)
    return out


def _or_zero(arr, shape):
    return np.zeros(shape) if arr is None else np.asarray(arr, dtype=np.float64)


def backward(ctx: RenderContext, d_out: MapGrads) -> GradientSet:
    """Exact gradients of ``sum(d_out * outputs)`` with respect to every scene parameter.

    The median-depth selection is treated as fixed: its gradient reaches only the
    selected splat's intersection distance.
    """
    if ctx is None:
        raise ValueError("render was called without retain=True")
    scene, prep, sensor, config = ctx.scene, ctx.prep, ctx.sensor, ctx.config
    H, W = sensor.shape
    hw = (H, W)
    grads = GradientSet.zeros_like(scene)

    # Ray-drop composition P = prior + (1 - prior) P_gs.
    g_drop = _or_zero(d_out.raydrop, hw)
    g_pgs = _or_zero(d_out.raydrop_gs, hw) + g_drop * (1.0 - ctx.prior)
    grads.prior_logit = g_drop * (1.0 - ctx.raydrop_gs) * ctx.prior * (1.0 - ctx.prior)

    # Normal map is the normalised blend.
    g_normal = _or_zero(d_out.normal, hw + (3,))
    norm = np.linalg.norm(ctx.normal_sum, axis=2, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    unit = ctx.normal_sum / safe
    g_nsum = np.where(norm > 0, (g_normal - unit * np.sum(unit * g_normal, axis=2,
                                                          keepdims=True)) / safe, 0.0)

    g_d = _or_zero(d_out.mean_depth, hw) + _or_zero(d_out.distort_B, hw)
    g_a = _or_zero(d_out.accum_alpha, hw) + _or_zero(d_out.distort_A, hw)
    g_c = _or_zero(d_out.distort_C, hw)
    g_i = _or_zero(d_out.intensity, hw)
    g_med = _or_zero(d_out.median_depth, hw)

    if len(scene) == 0:
        return grads
    dirs, h_x, h_y, shb = ray_table(sensor)
    slots = np.zeros((len(ctx.grid), K.SLOT_WIDTH))
    K.backward_kernel(prep.A, prep.B, prep.C, prep.opac, prep.nrm, prep.ish, prep.dsh,
                      dirs, h_x, h_y, shb, ctx.grid.offsets, ctx.grid.entries,
                      config.tile_size, config.cutoff_sq, config.eps_det, config.eps_near,
                      config.alpha_min, config.alpha_max,
                      np.ascontiguousarray(g_d), np.ascontiguousarray(g_a),
                      np.ascontiguousarray(g_c), np.ascontiguousarray(g_i),
                      np.ascontiguousarray(g_pgs), np.ascontiguousarray(g_nsum),
                      np.ascontiguousarray(g_med), ctx.med_entry, ctx.n_proc, slots)
    per_prim = K.reduce_slots(slots, ctx.grid.entries, len(scene))
    _chain_to_params(scene, ctx.t, prep, per_prim, grads)
    grads.check_finite()
    return grads


def _chain_to_params(scene: Scene, t: float, prep: PreparedSplats, g: np.ndarray,
                     grads: GradientSet) -> None:
    rot = prep.rot
    # Sensor-frame gradients back to world frame: x' = R x  =>  g_x = R^T g_x'.
    g_a = g[:, K.SLOT_A:K.SLOT_A + 3] @ rot
    g_b = g[:, K.SLOT_B:K.SLOT_B + 3] @ rot
    g_c = g[:, K.SLOT_C:K.SLOT_C + 3] @ rot
    g_n = g[:, K.SLOT_NRM:K.SLOT_NRM + 3] @ rot
    g_opac = g[:, K.SLOT_OPAC]

    s = prep.scale
    grads.tu = s[:, 0:1] * g_a
    grads.tv = s[:, 1:2] * g_b
    grads.log_scale = np.stack([s[:, 0] * np.sum(scene.tu * g_a, axis=1),
                                s[:, 1] * np.sum(scene.tv * g_b, axis=1)], axis=1)

    # n = (t_u x t_v) / |t_u x t_v|
    n = prep.normal_world
    g_cross = (g_n - n * np.sum(n * g_n, axis=1, keepdims=True)) / np.maximum(
        prep.cross_norm, 1e-300)[:, None]
    grads.tu += np.cross(scene.tv, g_cross)
    grads.tv += np.cross(g_cross, scene.tu)

    # centre = mu + amp(t - tau) v
    grads.mu = g_c
    grads.vib_dir = prep.amp[:, None] * g_c
    g_tau = -prep.phase_cos * np.sum(scene.vib_dir * g_c, axis=1)

    # opacity = sigmoid(raw) exp(-dt^2 / (2 beta^2))
    sig = scene.opacity
    beta2 = scene.beta ** 2
    g_o = g_opac * prep.opac
    grads.opacity_raw = g_o * (1.0 - sig)
    g_tau += g_o * prep.dt / beta2
    grads.decay_rate_raw = g_o * prep.dt * prep.dt / beta2
    grads.life_peak = g_tau

    grads.intensity_sh = g[:, K.SLOT_ISH:K.SLOT_ISH + scene.intensity_sh.shape[1]].copy()
    grads.raydrop_sh = g[:, K.SLOT_DSH:K.SLOT_DSH + scene.raydrop_sh.shape[1]].copy()
