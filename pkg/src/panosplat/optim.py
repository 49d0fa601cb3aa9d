"""Training loop: Adam over per-attribute parameter groups, pruning, checkpoints."""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import raster
from .lidario import Frame, FormatError, scene_from_bytes, scene_to_bytes
from .losses import LossWeights, compute_losses
from .panocam import SensorModel
from .scene import PARAM_FIELDS, Scene, orthonormalize, peak_opacity

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

OPTIM_MAGIC = b"PSLO"
OPTIM_VERSION = 1
_OPTIM_HEADER = struct.Struct("<4sIQQd")

# Attribute groups sharing one learning rate.
LR_GROUPS = {
    "mu": ("mu",),
    "vib_dir": ("vib_dir",),
    "frame": ("tu", "tv"),
    "scale": ("log_scale",),
    "opacity": ("opacity_raw",),
    "life_peak": ("life_peak",),
    "beta": ("decay_rate_raw",),
    "sh": ("intensity_sh", "raydrop_sh"),
    "prior": ("prior_logit",),
}
OPT_FIELDS = PARAM_FIELDS + ("prior_logit",)


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    """Optimisation settings.  ``lr_mu`` is multiplied by the scene extent."""

    iterations: int = 30000
    lr_mu: float = 1.6e-4
    lr_mu_final_ratio: float = 0.01
    lr_vib_dir: float = 1.6e-4
    lr_frame: float = 5e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_life_peak: float = 5e-4
    lr_beta: float = 5e-3
    lr_sh: float = 2.5e-3
    lr_prior: float = 5e-3
    prune_interval: int = 500
    prune_threshold: float = 0.005
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    tile_size: int = 16
    snapshot_every: int = 0
    log_every: int = 1
    freeze: tuple[str, ...] = ()
    n_cd: int = 16384

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        for name in LR_GROUPS:
            if getattr(self, f"lr_{name}") < 0:
                raise ValueError(f"learning rate lr_{name} must be non-negative")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.freeze = tuple(self.freeze)
        unknown = set(self.freeze) - set(OPT_FIELDS)
        if unknown:
            raise ValueError(f"unknown frozen fields {sorted(unknown)}")

    def lr_table(self, extent: float, step: int) -> dict[str, float]:
        """Learning rate per parameter field at optimiser step ``step`` (0-based)."""
        frac = min(step / max(self.iterations, 1), 1.0)
        table = {}
        for group, names in LR_GROUPS.items():
            lr = getattr(self, f"lr_{group}")
            if group == "mu":
                lr = lr * extent * self.lr_mu_final_ratio ** frac
            for name in names:
                table[name] = 0.0 if name in self.freeze else lr
        return table

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freeze"] = list(self.freeze)
        return d


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> AdamState:
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})

    def subset(self, keep: np.ndarray) -> AdamState:
        """Drop moments of pruned primitives (per-pixel prior moments are kept)."""
        m = {k: (a if k == "prior_logit" else a[keep]) for k, a in self.m.items()}
        v = {k: (a if k == "prior_logit" else a[keep]) for k, a in self.v.items()}
        return AdamState(self.step, m, v)


def adaptive_step(params: dict, grads: dict, state: AdamState, lr_table: dict) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    state.step += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.step
    bc2 = 1.0 - ADAM_BETA2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        lr = lr_table.get(name, 0.0)
        if lr:
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return state


def prune(scene: Scene, o_prune: float) -> Scene:
    """Drop primitives whose peak opacity over the sequence stays below ``o_prune``."""
    keep = prune_mask(scene, o_prune)
    if not keep.any():
        raise ValueError("pruning would remove every primitive")
    return scene.subset(keep)


def prune_mask(scene: Scene, o_prune: float) -> np.ndarray:
    if o_prune <= 0:
        return np.ones(len(scene), dtype=bool)
    return peak_opacity(scene, *scene.time_range) >= o_prune


def scene_extent(scene: Scene, frames: list[Frame]) -> float:
    """Radius of the primitive cloud around the mean sensor position."""
    origins = np.array([np.linalg.inv(f.pose)[:3, 3] for f in frames])
    center = origins.mean(axis=0)
    if len(scene) == 0:
        return 1.0
    return float(max(np.linalg.norm(scene.mu - center, axis=1).max(), 1e-6))


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)

    def append(self, rec: dict) -> None:
        self.records.append(rec)

    def totals(self) -> np.ndarray:
        return np.array([r["total"] for r in self.records])


@dataclass
class TrainState:
    """Everything needed to continue a run bit-identically."""

    scene: Scene
    adam: AdamState
    iteration: int = 0
    extent: float = 0.0  # scales lr_mu; fixed when the run starts


def frame_schedule(n_frames: int, seed: int, iteration: int) -> int:
    """Frame index for ``iteration``: a seeded permutation per pass over the frames."""
    epoch, pos = divmod(iteration, n_frames)
    order = np.random.default_rng([seed, epoch]).permutation(n_frames)
    return int(order[pos])


def train_step(state: TrainState, frame: Frame, sensor: SensorModel, config: TrainConfig,
               extent: float):
    """Render, score and update once.  Returns ``(terms, total)``."""
    scene = state.scene
    sens = sensor.with_pose(frame.pose)
    rcfg = raster.RasterConfig(tile_size=config.tile_size)
    out = raster.render(scene, frame.timestamp, sens, rcfg, retain=True)
    rng = np.random.default_rng([config.seed, state.iteration, 1])
    terms, total, g_maps = compute_losses(out, frame.range, frame.intensity, sens,
                                          config.weights, n_cd=config.n_cd, rng=rng)
    if not math.isfinite(total):
        raise NumericalError(f"non-finite loss {total} at iteration {state.iteration}")
    grads = raster.backward(out.context, g_maps)
    try:
        grads.check_finite()
    except FloatingPointError as exc:
        raise NumericalError(f"iteration {state.iteration}: {exc}") from exc
    params = scene.params()
    adaptive_step(params, grads.as_dict(), state.adam, config.lr_table(extent, state.iteration))
    scene.tu, scene.tv = orthonormalize(scene.tu, scene.tv)
    return terms, total


def train(scene: Scene, frames: list[Frame], config: TrainConfig, sensor: SensorModel,
          state: TrainState | None = None, snapshot_dir=None, callback=None,
          stop_at: int | None = None):
    """Optimise ``scene`` against ``frames``.  Returns ``(scene, log, state)``.

    Pass a previous ``state`` to resume; the remaining iterations then reproduce
    an uninterrupted run exactly.  ``stop_at`` ends the run early (exclusive
    iteration bound) without changing the schedule.
    """
    if not frames:
        raise ValueError("training needs at least one frame")
    if state is None:
        state = TrainState(scene.copy(), AdamState.zeros_like(scene.params()))
    if not state.extent > 0:
        state.extent = scene_extent(state.scene, frames)
    extent = state.extent
    log = TrainingLog()
    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    while state.iteration < end:
        it = state.iteration
        fi = frame_schedule(len(frames), config.seed, it)
        try:
            terms, total = train_step(state, frames[fi], sensor, config, extent)
        except NumericalError:
            if snapshot_dir is not None:
                save_checkpoint(Path(snapshot_dir) / f"nan_iter{it:06d}.psls", state)
            raise
        state.iteration += 1
        if config.log_every and (it % config.log_every == 0 or state.iteration == end):
            rec = {"iter": it, "frame": fi, "total": total, "n": len(state.scene)}
            rec.update({k: float(v) for k, v in terms.items()})
            log.append(rec)
            if callback is not None:
                callback(rec, state)
        if config.prune_interval and state.iteration % config.prune_interval == 0 \
                and state.iteration < config.iterations:
            keep = prune_mask(state.scene, config.prune_threshold)
            if keep.any() and not keep.all():
                state.scene = state.scene.subset(keep)
                state.adam = state.adam.subset(keep)
        if snapshot_dir is not None and config.snapshot_every \
                and state.iteration % config.snapshot_every == 0:
            save_checkpoint(Path(snapshot_dir) / f"iter{state.iteration:06d}.psls", state)
    return state.scene, log, state


def checkpoint_bytes(state: TrainState) -> bytes:
    parts = [scene_to_bytes(state.scene),
             _OPTIM_HEADER.pack(OPTIM_MAGIC, OPTIM_VERSION, state.adam.step, state.iteration,
                                state.extent)]
    for name in OPT_FIELDS:
        parts.append(state.adam.m[name].astype("<f8").tobytes())
        parts.append(state.adam.v[name].astype("<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, state: TrainState) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def load_checkpoint(path) -> TrainState:
    """Read a scene checkpoint; optimiser moments are zeroed if the file has none."""
    data = Path(path).read_bytes()
    scene, off = scene_from_bytes(data)
    params = scene.params()
    if off == len(data):
        return TrainState(scene, AdamState.zeros_like(params), 0)
    if len(data) < off + _OPTIM_HEADER.size:
        raise FormatError("optimiser section truncated")
    magic, version, step, iteration, extent = _OPTIM_HEADER.unpack_from(data, off)
    if magic != OPTIM_MAGIC:
        raise FormatError(f"bad optimiser magic {magic!r}")
    if version != OPTIM_VERSION:
        raise FormatError(f"unsupported optimiser version {version}")
    off += _OPTIM_HEADER.size
    m, v = {}, {}
    for name in OPT_FIELDS:
        n = params[name].size
        if len(data) < off + 16 * n:
            raise FormatError("optimiser section truncated")
        shape = params[name].shape
        m[name] = np.frombuffer(data, "<f8", n, off).reshape(shape).copy()
        v[name] = np.frombuffer(data, "<f8", n, off + 8 * n).reshape(shape).copy()
        off += 16 * n
    if off != len(data):
        raise FormatError("trailing bytes after optimiser section")
    return TrainState(scene, AdamState(int(step), m, v), int(iteration), float(extent))


def init_scene_from_frames(frames: list[Frame], sensor: SensorModel, init=None) -> Scene:
    """Seed a scene from the union of every frame's back-projected returns."""
    from .lidario import range_to_points
    from .scene import InitConfig, init_from_pointcloud

    init = init or InitConfig()
    pts, inten, origins, stamps = [], [], [], []
    for f in frames:
        p, i = range_to_points(f, sensor.with_pose(f.pose))
        pts.append(p)
        inten.append(i)
        origins.append(np.broadcast_to(np.linalg.inv(f.pose)[:3, 3], p.shape))
        stamps.append(np.full(len(p), f.timestamp))
    times = [f.timestamp for f in frames]
    cfg = InitConfig(**{**asdict(init), "image_shape": sensor.shape,
                        "time_range": (min(times), max(times))})
    return init_from_pointcloud(np.concatenate(pts), np.concatenate(inten), cfg,
                                sensor_origins=np.concatenate(origins),
                                timestamps=np.concatenate(stamps))
