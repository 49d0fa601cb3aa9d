"""Range-map frames, scene checkpoints, projections, and the synthetic generator.

Frame file (little-endian)::

    b"PSLF" | u32 version=1 | u32 W | u32 H | f64 timestamp | 16 x f64 pose (row-major)
    | W*H f32 range (row-major) | W*H f32 intensity

Scene checkpoint (little-endian)::

    b"PSLS" | u32 version=1 | u32 N | f64 cycle_length | f64 t_start | f64 t_end
    | u32 H | u32 W | N x 35 f64 primitive block | H*W f64 prior logits
    [ b"PSLO" optimiser section, see ``optim.save_checkpoint`` ]

Primitive fields are stored in declaration order: mu, tu, tv, log_scale,
opacity_raw, vib_dir, life_peak, decay_rate_raw, intensity_sh, raydrop_sh.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .panocam import (SensorModel, angles_to_pixel, check_rigid, dir_to_angles, invert_rigid,
                      ray_directions)
from .scene import PARAM_WIDTH, Scene

FRAME_MAGIC = b"PSLF"
SCENE_MAGIC = b"PSLS"
FORMAT_VERSION = 1
_FRAME_HEADER = struct.Struct("<4sIIId16d")
_SCENE_HEADER = struct.Struct("<4sIIdddII")


class FormatError(ValueError):
    """Malformed, truncated or incompatible file."""


@dataclass
class Frame:
    """One LiDAR sweep as panoramic maps.  ``range == 0`` marks a dropped ray."""

    range: np.ndarray
    intensity: np.ndarray
    timestamp: float
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.range = np.ascontiguousarray(self.range, dtype=np.float32)
        self.intensity = np.ascontiguousarray(self.intensity, dtype=np.float32)
        self.pose = np.ascontiguousarray(self.pose, dtype=np.float64)
        self.timestamp = float(self.timestamp)
        if self.range.ndim != 2 or self.range.size == 0:
            raise ValueError("frame maps must be non-empty 2D arrays")
        if self.intensity.shape != self.range.shape:
            raise ValueError("range and intensity maps differ in shape")

    @property
    def hit_mask(self) -> np.ndarray:
        return self.range > 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.range.shape


def frame_to_bytes(frame: Frame) -> bytes:
    h, w = frame.shape
    header = _FRAME_HEADER.pack(FRAME_MAGIC, FORMAT_VERSION, w, h, frame.timestamp,
                                *frame.pose.reshape(-1))
    return (header + frame.range.astype("<f4").tobytes()
            + frame.intensity.astype("<f4").tobytes())


def frame_from_bytes(data: bytes) -> Frame:
    if len(data) < _FRAME_HEADER.size:
        raise FormatError("frame file truncated in header")
    magic, version, w, h, ts, *pose = _FRAME_HEADER.unpack_from(data)
    if magic != FRAME_MAGIC:
        raise FormatError(f"bad frame magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported frame version {version}")
    if w == 0 or h == 0:
        raise FormatError("zero-size frame")
    n = w * h
    expected = _FRAME_HEADER.size + 8 * n
    if len(data) != expected:
        raise FormatError(f"frame payload is {len(data)} bytes, expected {expected}")
    off = _FRAME_HEADER.size
    rng = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(h, w)
    inten = np.frombuffer(data, dtype="<f4", count=n, offset=off + 4 * n).reshape(h, w)
    return Frame(rng.astype(np.float32), inten.astype(np.float32), ts,
                 np.array(pose, dtype=np.float64).reshape(4, 4))


def save_frame(path, frame: Frame) -> None:
    Path(path).write_bytes(frame_to_bytes(frame))


def load_frame(path) -> Frame:
    return frame_from_bytes(Path(path).read_bytes())


def scene_to_bytes(scene: Scene) -> bytes:
    h, w = scene.prior_logit.shape
    buf = io.BytesIO()
    buf.write(_SCENE_HEADER.pack(SCENE_MAGIC, FORMAT_VERSION, len(scene), scene.cycle_length,
                                 scene.time_range[0], scene.time_range[1], h, w))
    buf.write(scene.pack().astype("<f8").tobytes())
    buf.write(scene.prior_logit.astype("<f8").tobytes())
    return buf.getvalue()


def scene_from_bytes(data: bytes) -> tuple[Scene, int]:
    """Parse a scene block; returns the scene and the number of bytes consumed."""
    if len(data) < _SCENE_HEADER.size:
        raise FormatError("checkpoint truncated in header")
    magic, version, n, cycle, t0, t1, h, w = _SCENE_HEADER.unpack_from(data)
    if magic != SCENE_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = _SCENE_HEADER.size
    end = off + 8 * (n * PARAM_WIDTH + h * w)
    if len(data) < end:
        raise FormatError("checkpoint truncated in body")
    block = np.frombuffer(data, dtype="<f8", count=n * PARAM_WIDTH, offset=off)
    prior = np.frombuffer(data, dtype="<f8", count=h * w, offset=off + 8 * n * PARAM_WIDTH)
    scene = Scene.unpack(block.reshape(n, PARAM_WIDTH).astype(np.float64),
                         cycle_length=cycle, prior_logit=prior.reshape(h, w).copy(),
                         time_range=(t0, t1))
    return scene, end


def save_scene(path, scene: Scene) -> None:
    Path(path).write_bytes(scene_to_bytes(scene))


def load_scene(path) -> Scene:
    return scene_from_bytes(Path(path).read_bytes())[0]


def range_to_points(frame: Frame, sensor: SensorModel, world: bool = True):
    """Back-project hit pixels.  Returns ``(points (M, 3), intensity (M,))``."""
    dirs = ray_directions(sensor)
    mask = frame.hit_mask
    pts = frame.range[mask].astype(np.float64)[:, None] * dirs[mask]
    if world:
        inv = invert_rigid(frame.pose)
        pts = pts @ inv[:3, :3].T + inv[:3, 3]
    return pts, frame.intensity[mask].astype(np.float64)


def points_to_range(points, sensor: SensorModel, pose, intensity=None,
                    timestamp: float = 0.0) -> Frame:
    """Project world points into a range map, keeping the nearest return per pixel."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("no points to project")
    intensity = np.zeros(len(points)) if intensity is None else np.asarray(intensity)
    pose = check_rigid(pose)
    local = points @ pose[:3, :3].T + pose[:3, 3]
    r = np.linalg.norm(local, axis=1)
    keep = r > 0
    local, r, intensity = local[keep], r[keep], intensity[keep]
    xi, eta = angles_to_pixel(dir_to_angles(local), sensor)
    col = np.floor(np.atleast_1d(xi)).astype(np.int64) % sensor.width
    row = np.floor(np.atleast_1d(eta)).astype(np.int64)
    inside = (row >= 0) & (row < sensor.height)
    col, row, r, intensity = col[inside], row[inside], r[inside], intensity[inside]
    flat = row * sensor.width + col
    # Sort by pixel then range; the first entry of each pixel run is the nearest return.
    order = np.lexsort((r, flat))
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat[order][1:] != flat[order][:-1]
    sel = order[first]
    rng_map = np.zeros(sensor.height * sensor.width, dtype=np.float64)
    int_map = np.zeros_like(rng_map)
    rng_map[flat[sel]] = r[sel]
    int_map[flat[sel]] = intensity[sel]
    shape = (sensor.height, sensor.width)
    return Frame(rng_map.reshape(shape), int_map.reshape(shape), timestamp, pose)


# --------------------------------------------------------------------------
# Synthetic scenes
# --------------------------------------------------------------------------

@dataclass
class SurfaceModel:
    """Return-strength and drop behaviour shared by every analytic primitive."""

    intensity: float = 0.5
    drop_base: float = 0.0
    drop_grazing: float = 0.0
    grazing_cos: float = 0.1


@dataclass
class Plane:
    point: tuple
    normal: tuple
    surface: SurfaceModel = field(default_factory=SurfaceModel)


@dataclass
class Sphere:
    center: tuple
    radius: float
    surface: SurfaceModel = field(default_factory=SurfaceModel)


@dataclass
class Box:
    """Axis-aligned box; ``velocity`` (m/s) moves it from ``center`` at ``t_ref``."""

    center: tuple
    half_size: tuple
    velocity: tuple = (0.0, 0.0, 0.0)
    t_ref: float = 0.0
    surface: SurfaceModel = field(default_factory=SurfaceModel)

    def center_at(self, t: float) -> np.ndarray:
        return np.asarray(self.center, float) + np.asarray(self.velocity, float) * (t - self.t_ref)

    @property
    def moving(self) -> bool:
        return any(v != 0 for v in self.velocity)


@dataclass
class SyntheticSceneSpec:
    primitives: list
    sensor: SensorModel
    poses: list
    timestamps: list
    range_atten: float = 100.0
    seed: int = 0

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        if len(ts) != len(self.poses):
            raise ValueError("one timestamp per pose is required")
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        for p in self.poses:
            check_rigid(p)


def sensor_pose_at(position, yaw: float = 0.0) -> np.ndarray:
    """World-to-sensor pose of a sensor at ``position`` rotated by ``yaw`` about y."""
    c, s = math.cos(yaw), math.sin(yaw)
    rot_ws = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])  # sensor->world
    pose = np.eye(4)
    pose[:3, :3] = rot_ws.T
    pose[:3, 3] = -rot_ws.T @ np.asarray(position, dtype=float)
    return pose


def straight_trajectory(start, end, n_frames: int, t0: float = 0.0, dt: float = 0.1):
    if n_frames < 1:
        raise ValueError("need at least one frame")
    start, end = np.asarray(start, float), np.asarray(end, float)
    steps = np.linspace(0.0, 1.0, n_frames) if n_frames > 1 else np.zeros(1)
    poses = [sensor_pose_at(start + s * (end - start)) for s in steps]
    return poses, [t0 + i * dt for i in range(n_frames)]


def _intersect_plane(o, d, prim):
    n = np.asarray(prim.normal, float)
    n = n / np.linalg.norm(n)
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((np.asarray(prim.point, float) - o) @ n) / denom
    t = np.where(np.abs(denom) > 1e-12, t, np.inf)
    return t, np.broadcast_to(n, d.shape)


def _intersect_sphere(o, d, prim):
    c = np.asarray(prim.center, float)
    oc = o - c
    b = d @ oc
    disc = b * b - (oc @ oc - prim.radius ** 2)
    sq = np.sqrt(np.maximum(disc, 0.0))
    t_near = -b - sq
    t_far = -b + sq
    t = np.where(t_near > 1e-9, t_near, t_far)
    t = np.where(disc >= 0, t, np.inf)
    hit = o + t[..., None] * d
    normal = (hit - c) / prim.radius
    return t, normal


def _intersect_box(o, d, prim, t):
    c = prim.center_at(t)
    half = np.asarray(prim.half_size, float)
    lo, hi = c - half, c + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    t_enter = tmin.max(axis=-1)
    t_exit = tmax.min(axis=-1)
    axis_enter = tmin.argmax(axis=-1)
    inside = t_enter <= 1e-9
    t_hit = np.where(inside, t_exit, t_enter)
    axis = np.where(inside, tmax.argmin(axis=-1), axis_enter)
    t_hit = np.where((t_exit >= t_enter) & (t_exit > 1e-9), t_hit, np.inf)
    normal = np.zeros(d.shape)
    sel = np.take_along_axis(d, axis[..., None], axis=-1)[..., 0]
    np.put_along_axis(normal, axis[..., None], -np.sign(sel)[..., None], axis=-1)
    return t_hit, normal


def trace(primitives, origin, dirs, t: float):
    """Nearest analytic hit per ray: ``(distance, normal, primitive index)``."""
    best = np.full(dirs.shape[:-1], np.inf)
    normal = np.zeros(dirs.shape)
    label = np.full(dirs.shape[:-1], -1, dtype=np.int64)
    for i, prim in enumerate(primitives):
        if isinstance(prim, Plane):
            th, nh = _intersect_plane(origin, dirs, prim)
        elif isinstance(prim, Sphere):
            th, nh = _intersect_sphere(origin, dirs, prim)
        elif isinstance(prim, Box):
            th, nh = _intersect_box(origin, dirs, prim, t)
        else:
            raise TypeError(f"unknown primitive {type(prim).__name__}")
        closer = (th > 1e-9) & (th < best)
        best = np.where(closer, th, best)
        normal = np.where(closer[..., None], nh, normal)
        label = np.where(closer, i, label)
    return best, normal, label


def _drop_uniforms(seed: int, frame_index: int, shape) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=seed, counter=[frame_index, 0, 0, 0]))
    return gen.random(shape)


def synth_generate(spec: SyntheticSceneSpec, return_labels: bool = False):
    """Ray-trace every frame of the trajectory against the analytic scene.

    Intensity is ``base * |cos(incidence)| * exp(-r / range_atten)``.  A ray is
    dropped when it misses, exceeds the sensor's max range, or when a uniform
    draw seeded by ``(seed, frame, pixel)`` falls below the surface's drop
    probability.
    """
    frames, labels = [], []
    sensor = spec.sensor
    local_dirs = ray_directions(sensor)
    for fi, (pose, t) in enumerate(zip(spec.poses, spec.timestamps)):
        inv = invert_rigid(np.asarray(pose, float))
        origin = inv[:3, 3]
        dirs = local_dirs @ inv[:3, :3].T
        dist, normal, label = trace(spec.primitives, origin, dirs, t)
        hit = np.isfinite(dist) & (dist <= sensor.max_range)
        cos_inc = np.abs(np.sum(normal * dirs, axis=-1))
        base = np.zeros(dist.shape)
        p_drop = np.zeros(dist.shape)
        for i, prim in enumerate(spec.primitives):
            sel = label == i
            s = prim.surface
            base[sel] = s.intensity
            graze = np.clip((s.grazing_cos - cos_inc[sel]) / s.grazing_cos, 0.0, 1.0) \
                if s.grazing_cos > 0 else 0.0
            p_drop[sel] = np.clip(s.drop_base + s.drop_grazing * graze, 0.0, 1.0)
        hit &= _drop_uniforms(spec.seed, fi, dist.shape) >= p_drop
        rng_map = np.where(hit, dist, 0.0)
        with np.errstate(invalid="ignore"):
            inten = np.where(hit, base * cos_inc * np.exp(-rng_map / spec.range_atten), 0.0)
        frames.append(Frame(rng_map, inten, t, pose))
        labels.append(np.where(hit, label, -1))
    return (frames, labels) if return_labels else frames


# --------------------------------------------------------------------------
# Structured-text spec files
# --------------------------------------------------------------------------

def _surface(d) -> SurfaceModel:
    return SurfaceModel(**(d or {}))


def spec_from_dict(d: dict) -> SyntheticSceneSpec:
    """Build a spec from the YAML schema documented in the README."""
    s = d["sensor"]
    if "elev_max_deg" in s:
        sensor = SensorModel.from_degrees(int(s["width"]), int(s["height"]), s["elev_max_deg"],
                                          s["elev_min_deg"], max_range=s.get("max_range", 80.0))
    else:
        sensor = SensorModel(int(s["width"]), int(s["height"]), s["vfov_min"], s["vfov_max"],
                             max_range=s.get("max_range", 80.0))
    prims = []
    for p in d.get("primitives", []):
        kind = p["type"]
        surf = _surface(p.get("surface"))
        if kind == "plane":
            prims.append(Plane(tuple(p["point"]), tuple(p["normal"]), surf))
        elif kind == "sphere":
            prims.append(Sphere(tuple(p["center"]), float(p["radius"]), surf))
        elif kind in ("box", "moving_box"):
            prims.append(Box(tuple(p["center"]), tuple(p["half_size"]),
                             tuple(p.get("velocity", (0.0, 0.0, 0.0))),
                             float(p.get("t_ref", 0.0)), surf))
        else:
            raise ValueError(f"unknown primitive type {kind!r}")
    traj = d["trajectory"]
    if "poses" in traj:
        poses = [np.asarray(p, float).reshape(4, 4) for p in traj["poses"]]
        stamps = [float(t) for t in traj["timestamps"]]
    else:
        n = int(traj["n_frames"])
        if n < 1:
            raise ValueError("trajectory needs at least one frame")
        poses, stamps = straight_trajectory(traj["start"], traj["end"], n,
                                            float(traj.get("t0", 0.0)), float(traj.get("dt", 0.1)))
    return SyntheticSceneSpec(prims, sensor, poses, stamps,
                              range_atten=float(d.get("range_atten", 100.0)),
                              seed=int(d.get("seed", 0)))


def load_spec(path) -> SyntheticSceneSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return spec_from_dict(yaml.safe_load(fh))


def _room(width: float, height: float, near: float, far: float, floor_y: float):
    """Floor plus four walls (no ceiling) as inward-facing infinite planes."""
    return [
        Plane((0.0, floor_y, 0.0), (0.0, -1.0, 0.0), SurfaceModel(0.45, 0.005, 0.6, 0.12)),
        Plane((-width / 2, 0.0, 0.0), (1.0, 0.0, 0.0), SurfaceModel(0.7, 0.005, 0.6, 0.12)),
        Plane((width / 2, 0.0, 0.0), (-1.0, 0.0, 0.0), SurfaceModel(0.55, 0.005, 0.6, 0.12)),
        Plane((0.0, 0.0, near), (0.0, 0.0, 1.0), SurfaceModel(0.8, 0.005, 0.6, 0.12)),
        Plane((0.0, 0.0, far), (0.0, 0.0, -1.0), SurfaceModel(0.6, 0.005, 0.6, 0.12)),
    ]


PRESETS = ("box_room", "box_room_dynamic", "smoke")


def preset_spec(name: str, width: int = 256, height: int = 32, n_frames: int = 20,
                seed: int = 0) -> SyntheticSceneSpec:
    """Built-in scenes.

    ``box_room``: 12 x 22 m room (floor + 4 walls) seen from a sensor 1.8 m above
    the floor moving 3.8 m straight ahead over ``n_frames`` frames at 10 Hz.
    ``box_room_dynamic`` adds a box driving at 1 m/s.  ``smoke`` is a tiny
    16 x 64 version of the room for quick runs.
    """
    if name == "smoke":
        width, height, n_frames = 64, 16, min(n_frames, 10)
    sensor = SensorModel.from_degrees(width, height, 10.0, -20.0, max_range=80.0)
    prims = _room(12.0, 0.0, -8.0, 14.0, 1.8)
    if name == "box_room_dynamic":
        prims.append(Box((-3.0, 1.1, 6.0), (0.9, 0.7, 1.8), velocity=(1.0, 0.0, 0.0), t_ref=0.0,
                         surface=SurfaceModel(0.9, 0.005, 0.6, 0.12)))
    elif name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    poses, stamps = straight_trajectory((0.0, 0.0, 0.0), (0.0, 0.0, 3.8), n_frames, 0.0, 0.1)
    return SyntheticSceneSpec(prims, sensor, poses, stamps, seed=seed)


def spec_to_dict(spec: SyntheticSceneSpec) -> dict:
    prims = []
    for p in spec.primitives:
        surf = vars(p.surface).copy()
        if isinstance(p, Plane):
            prims.append({"type": "plane", "point": list(p.point), "normal": list(p.normal),
                          "surface": surf})
        elif isinstance(p, Sphere):
            prims.append({"type": "sphere", "center": list(p.center), "radius": p.radius,
                          "surface": surf})
        else:
            prims.append({"type": "moving_box" if p.moving else "box", "center": list(p.center),
                          "half_size": list(p.half_size), "velocity": list(p.velocity),
                          "t_ref": p.t_ref, "surface": surf})
    return {
        "seed": spec.seed,
        "range_atten": spec.range_atten,
        "sensor": spec.sensor.intrinsics(),
        "primitives": prims,
        "trajectory": {"poses": [np.asarray(p).tolist() for p in spec.poses],
                       "timestamps": list(spec.timestamps)},
    }
