"""Command-line driver: synth, train, render, eval, ablate.

Exit codes: 0 success, 2 usage or invalid input, 3 file I/O or format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__, lidario, metrics, optim, raster
from .baseline3d import Scene3D, render_baseline
from .lidario import Frame, FormatError
from .losses import LossWeights
from .panocam import SensorModel, check_rigid
from .scene import InitConfig

log = logging.getLogger("panosplat")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
DROP_THRESHOLD = 0.5


class UsageError(Exception):
    pass


# Per-scene training settings.  Keys mirror the config file sections.
TRAIN_PRESETS = {
    "default": {},
    "smoke": {
        "init": {"max_points": 8, "scale_max": 1.0},
        "train": {"iterations": 50, "prune_interval": 0},
    },
    "box_room": {
        "init": {"max_points": 5000, "orientation": "pca", "scale_max": 0.4},
        "train": {"iterations": 1500, "lr_frame": 1e-3, "tile_size": 8},
    },
    "box_room_dynamic": {
        "init": {"max_points": 5000, "orientation": "pca", "scale_max": 0.4,
                 "life_mode": "observed", "life_beta": 0.2, "cycle_fraction": 1.0},
        "train": {"iterations": 1500, "lr_frame": 1e-3, "lr_vib_dir": 5e-3, "tile_size": 8},
    },
}

ABLATION_VARIANTS = {
    "full": {},
    "no_vibration": {"train": {"freeze": ["vib_dir"]}},
    "no_distortion": {"weights": {"dist": 0.0}},
    "no_normal": {"weights": {"n": 0.0}},
    "no_chamfer": {"weights": {"ch": 0.0}},
    "baseline3d": {"render": "baseline3d"},
}


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_structured(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a mapping at top level")
    return data


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_override(text: str) -> dict:
    """``section.key=value`` -> nested dict; the value is parsed as YAML."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise UsageError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    section, name = key.split(".", 1)
    return {section: {name: yaml.safe_load(raw)}}


def _build_configs(cfg: dict) -> tuple[InitConfig, optim.TrainConfig]:
    allowed = {"init", "train", "weights", "holdout"}
    unknown = set(cfg) - allowed
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}")
    init_kw = dict(cfg.get("init", {}))
    train_kw = dict(cfg.get("train", {}))
    weights_kw = dict(cfg.get("weights", {}))
    for kw, cls in ((init_kw, InitConfig), (train_kw, optim.TrainConfig),
                    (weights_kw, LossWeights)):
        names = {f.name for f in fields(cls)}
        bad = set(kw) - names
        if bad:
            raise UsageError(f"unknown {cls.__name__} keys {sorted(bad)}")
    for key in ("image_shape", "time_range"):
        if key in init_kw:
            init_kw[key] = tuple(init_kw[key])
    try:
        train = optim.TrainConfig(**train_kw, weights=LossWeights(**weights_kw))
        init = InitConfig(**init_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return init, train


def _config_dump(init: InitConfig, train: optim.TrainConfig, holdout: dict) -> dict:
    t = train.to_dict()
    weights = t.pop("weights")
    return {"init": asdict(init), "train": t, "weights": weights, "holdout": holdout}


def _load_manifest(path) -> tuple[dict, list[Frame], SensorModel, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        man = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a valid manifest ({exc})") from exc
    root = path.parent
    frames = [lidario.load_frame(root / e["file"]) for e in man["frames"]]
    s = man["sensor"]
    sensor = SensorModel(int(s["width"]), int(s["height"]), float(s["vfov_min"]),
                         float(s["vfov_max"]), max_range=float(s.get("max_range", 80.0)))
    return man, frames, sensor, root


def split_holdout(n: int, every: int = 10, offset: int = 5) -> tuple[list[int], list[int]]:
    """Indices ``i`` with ``i % every == offset`` are held out; the rest train."""
    if every <= 0:
        return list(range(n)), []
    test = [i for i in range(n) if i % every == offset % every]
    train = [i for i in range(n) if i not in set(test)]
    if not train:
        raise UsageError("hold-out rule leaves no training frames")
    return train, test


def render_frame(scene, sensor: SensorModel, pose, t: float, use_drop: bool = True,
                 path: str = "exact", tile_size: int = 16) -> Frame:
    """Render one LiDAR frame; the final hit mask applies the ray-drop threshold."""
    sens = sensor.with_pose(pose)
    if path == "baseline3d":
        out = render_baseline(Scene3D.from_scene(scene, t), sens)
    else:
        out = raster.render(scene, t, sens, raster.RasterConfig(tile_size=tile_size))
    hit = out.median_depth > 0
    if use_drop:
        hit &= out.raydrop < DROP_THRESHOLD
    rng = np.where(hit, out.median_depth, 0.0)
    inten = np.where(hit, np.clip(out.intensity, 0.0, 1.0), 0.0)
    return Frame(rng, inten, t, pose)


def evaluate_frames(preds: list[Frame], gts: list[Frame], sensor: SensorModel) -> dict:
    rows = [metrics.frame_metrics(p, g, sensor) for p, g in zip(preds, gts)]
    return {"frames": rows, "aggregate": metrics.aggregate(rows)}


def _print_report(report: dict, stream=None) -> None:
    stream = stream or sys.stdout
    for i, row in enumerate(report["frames"]):
        stream.write(f"frame {i}: " + " ".join(f"{k}={v:.6g}" for k, v in row.items()) + "\n")
    for k, v in report["aggregate"].items():
        stream.write(f"{k}: {v:.6g}\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.spec is None and args.preset is None:
        raise UsageError("synth needs --spec FILE or --preset NAME")
    if args.frames is not None and args.frames < 1:
        raise UsageError("--frames must be at least 1")
    if args.spec is not None:
        data = _read_structured(args.spec)
        if args.seed is not None:
            data["seed"] = args.seed
        try:
            spec = lidario.spec_from_dict(data)
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"invalid scene spec: {exc}") from exc
        preset = data.get("preset", "default")
    else:
        kw = {"seed": args.seed or 0}
        if args.frames is not None:
            kw["n_frames"] = args.frames
        try:
            spec = lidario.preset_spec(args.preset, **kw)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        preset = args.preset
    frames, labels = lidario.synth_generate(spec, return_labels=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (f, lab) in enumerate(zip(frames, labels)):
        name = f"frame_{i:04d}.pslf"
        lidario.save_frame(out / name, f)
        np.save(out / f"labels_{i:04d}.npy", lab.astype(np.int16))
        entries.append({"file": name, "labels": f"labels_{i:04d}.npy", "timestamp": f.timestamp,
                        "pose": f.pose.tolist(), "sha256": _sha256(out / name)})
    (out / "scene_spec.yaml").write_text(yaml.safe_dump(lidario.spec_to_dict(spec)))
    manifest = {"version": __version__, "preset": preset, "seed": spec.seed,
                "sensor": spec.sensor.intrinsics(), "frames": entries}
    _write_json(out / "manifest.json", manifest)
    _write_json(out / "run_info.json", {"created": time.strftime("%Y-%m-%dT%H:%M:%S"),
                                        "argv": sys.argv})
    print(f"wrote {len(entries)} frames to {out}")
    return EXIT_OK


def _resolve_train_config(args, man: dict) -> tuple[InitConfig, optim.TrainConfig, dict]:
    preset = args.preset or man.get("preset", "default")
    if preset not in TRAIN_PRESETS:
        raise UsageError(f"unknown training preset {preset!r}")
    cfg = _merge({"holdout": {"every": 10, "offset": 5}}, TRAIN_PRESETS[preset])
    if args.config:
        cfg = _merge(cfg, _read_structured(args.config))
    for text in args.set or []:
        cfg = _merge(cfg, _parse_override(text))
    if args.iterations is not None:
        cfg = _merge(cfg, {"train": {"iterations": args.iterations}})
    if args.seed is not None:
        cfg = _merge(cfg, {"train": {"seed": args.seed}, "init": {"seed": args.seed}})
    holdout = cfg.pop("holdout", {"every": 10, "offset": 5})
    init, train = _build_configs(cfg)
    return init, train, holdout


def cmd_train(args) -> int:
    man, frames, sensor, _ = _load_manifest(args.manifest)
    init, config, holdout = _resolve_train_config(args, man)
    tr, te = split_holdout(len(frames), int(holdout.get("every", 10)), int(holdout.get("offset", 5)))
    train_frames = [frames[i] for i in tr]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        state = optim.load_checkpoint(args.resume)
        scene = state.scene
    else:
        state = None
        scene = optim.init_scene_from_frames(train_frames, sensor, init)
    _write_json(out / "config.json", {**_config_dump(init, config, holdout),
                                      "train_frames": tr, "test_frames": te})
    log_path = out / "log.jsonl"
    mode = "a" if args.resume else "w"
    with open(log_path, mode) as fh:
        def on_record(rec, _state):
            # report the manifest index rather than the position in the training list
            fh.write(json.dumps({**rec, "frame": tr[rec["frame"]]}, sort_keys=True) + "\n")

        snap = out / "snapshots" if config.snapshot_every else None
        if snap is not None:
            snap.mkdir(exist_ok=True)
        scene, _, state = optim.train(scene, train_frames, config, sensor, state=state,
                                      snapshot_dir=snap or out, callback=on_record,
                                      stop_at=args.stop_at)
    optim.save_checkpoint(out / "checkpoint.psls", state)
    report = {}
    if te:
        preds = [render_frame(scene, sensor, frames[i].pose, frames[i].timestamp,
                              tile_size=config.tile_size) for i in te]
        report = evaluate_frames(preds, [frames[i] for i in te], sensor)
        _write_json(out / "heldout_metrics.json", report)
        _print_report(report)
    print(f"trained {state.iteration} iterations, {len(scene)} primitives -> {out}")
    return EXIT_OK


def _read_poses(path) -> list[tuple[np.ndarray, float]]:
    data = yaml.safe_load(Path(path).read_text())
    items = data["poses"] if isinstance(data, dict) else data
    out = []
    for item in items:
        pose = np.asarray(item["pose"], dtype=np.float64).reshape(4, 4)
        try:
            check_rigid(pose)
        except ValueError as exc:
            raise UsageError(f"pose file: {exc}") from exc
        out.append((pose, float(item.get("timestamp", 0.0))))
    if not out:
        raise UsageError("pose file lists no poses")
    return out


def cmd_render(args) -> int:
    state = optim.load_checkpoint(args.checkpoint)
    scene = state.scene
    if args.manifest:
        man, frames, sensor, _ = _load_manifest(args.manifest)
        targets = [(f.pose, f.timestamp) for f in frames]
    else:
        if not args.poses or args.width is None:
            raise UsageError("render needs --manifest, or --poses with sensor flags")
        targets = _read_poses(args.poses)
        sensor = SensorModel.from_degrees(args.width, args.height, args.elev_max, args.elev_min)
    if scene.prior_logit.shape != sensor.shape:
        raise UsageError(f"checkpoint prior is {scene.prior_logit.shape}, sensor is "
                         f"{sensor.shape}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (pose, t) in enumerate(targets):
        frame = render_frame(scene, sensor, pose, t, use_drop=not args.no_drop, path=args.path)
        name = f"frame_{i:04d}.pslf"
        lidario.save_frame(out / name, frame)
        entry = {"file": name, "timestamp": t, "pose": np.asarray(pose).tolist(),
                 "sha256": _sha256(out / name)}
        if args.points:
            pts, inten = lidario.range_to_points(frame, sensor.with_pose(pose))
            txt = out / f"points_{i:04d}.xyz"
            np.savetxt(txt, np.column_stack([pts, inten]), fmt="%.6f")
            entry["points"] = txt.name
        entries.append(entry)
    _write_json(out / "manifest.json", {"version": __version__, "sensor": sensor.intrinsics(),
                                        "frames": entries, "source": str(args.checkpoint)})
    print(f"rendered {len(entries)} frames to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _, preds, sensor, _ = _load_manifest(args.pred)
    _, gts, _, _ = _load_manifest(args.gt)
    if args.frames:
        idx = [int(i) for i in args.frames.split(",")]
        gts = [gts[i] for i in idx]
    if len(preds) != len(gts):
        raise UsageError(f"{len(preds)} predicted frames but {len(gts)} ground-truth frames")
    report = evaluate_frames(preds, gts, sensor)
    _print_report(report)
    if args.out:
        _write_json(Path(args.out), report)
    return EXIT_OK


def run_ablation(frames, sensor, base_cfg: dict, variants: list[str], holdout: dict,
                 callback=None) -> dict:
    """Train each loss/feature variant and score it on the held-out frames.

    ``baseline3d`` reuses the scene trained by ``full`` and only swaps the
    render path.
    """
    tr, te = split_holdout(len(frames), int(holdout.get("every", 10)),
                           int(holdout.get("offset", 5)))
    if not te:
        te = tr[-1:]
    train_frames = [frames[i] for i in tr]
    trained = {}

    def fit(name):
        if name not in trained:
            spec = ABLATION_VARIANTS[name]
            cfg = _merge(base_cfg, {k: v for k, v in spec.items() if k in ("train", "weights")})
            init, config = _build_configs(cfg)
            scene = optim.init_scene_from_frames(train_frames, sensor, init)
            scene, tlog, _ = optim.train(scene, train_frames, config, sensor)
            trained[name] = (scene, tlog, config)
        return trained[name]

    table = {}
    for name in variants:
        path = ABLATION_VARIANTS[name].get("render", "exact")
        scene, tlog, config = fit("full" if path == "baseline3d" else name)
        preds = [render_frame(scene, sensor, frames[i].pose, frames[i].timestamp, path=path,
                              tile_size=config.tile_size) for i in te]
        rep = evaluate_frames(preds, [frames[i] for i in te], sensor)
        table[name] = {"metrics": rep["aggregate"],
                       "final_loss": tlog.records[-1] if tlog.records else {}}
        if callback:
            callback(name, table[name])
    return table


TABLE_COLUMNS = (("chamfer", "CD"), ("fscore", "F-score"), ("depth_rmse", "RMSE"),
                 ("depth_medae", "MedAE"), ("depth_ssim", "SSIM"), ("depth_psnr", "PSNR"),
                 ("intensity_rmse", "I-RMSE"), ("intensity_medae", "I-MedAE"),
                 ("intensity_ssim", "I-SSIM"), ("intensity_psnr", "I-PSNR"))


def format_table(table: dict) -> str:
    head = f"{'variant':<16}" + "".join(f"{label:>10}" for _, label in TABLE_COLUMNS)
    lines = [head, "-" * len(head)]
    for name, row in table.items():
        m = row["metrics"]
        lines.append(f"{name:<16}" + "".join(f"{m.get(k, float('nan')):>10.4f}"
                                             for k, _ in TABLE_COLUMNS))
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    variants = args.variants.split(",") if args.variants else list(ABLATION_VARIANTS)
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise UsageError(f"unknown ablation variants {unknown}; choose from "
                         f"{sorted(ABLATION_VARIANTS)}")
    man, frames, sensor, _ = _load_manifest(args.manifest)
    preset = args.preset or man.get("preset", "default")
    if preset not in TRAIN_PRESETS:
        raise UsageError(f"unknown training preset {preset!r}")
    cfg = _merge({"holdout": {"every": 10, "offset": 5}}, TRAIN_PRESETS[preset])
    if args.iterations is not None:
        cfg = _merge(cfg, {"train": {"iterations": args.iterations}})
    holdout = cfg.pop("holdout")
    table = run_ablation(frames, sensor, cfg, variants, holdout)
    text = format_table(table)
    print(text)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(text + "\n")
    _write_json(out / "ablation.json", table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="panosplat", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic LiDAR frames")
    s.add_argument("--spec", help="scene spec file (YAML)")
    s.add_argument("--preset", help=f"built-in scene: {', '.join(lidario.PRESETS)}")
    s.add_argument("--frames", type=int, help="number of frames (presets only)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="optimise a scene against a frame manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="YAML with init/train/weights/holdout sections")
    t.add_argument("--preset", help=f"training preset: {', '.join(TRAIN_PRESETS)}")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-at", type=int, help="stop before this iteration (for staged runs)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render frames from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--manifest", help="render at the poses/timestamps of this manifest")
    r.add_argument("--poses", help="YAML list of {pose: 4x4, timestamp: t}")
    r.add_argument("--width", type=int)
    r.add_argument("--height", type=int, default=32)
    r.add_argument("--elev-max", type=float, default=10.0)
    r.add_argument("--elev-min", type=float, default=-20.0)
    r.add_argument("--path", choices=("exact", "baseline3d"), default="exact")
    r.add_argument("--no-drop", action="store_true", help="ignore ray-drop; keep every return")
    r.add_argument("--points", action="store_true", help="also write x y z intensity files")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="compare predicted frames with ground truth")
    e.add_argument("--pred", required=True, help="manifest of predicted frames")
    e.add_argument("--gt", required=True, help="manifest of ground-truth frames")
    e.add_argument("--frames", help="comma-separated ground-truth indices to match")
    e.add_argument("--out", help="write the report as JSON here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare ablation variants")
    a.add_argument("--manifest", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--variants", help=f"comma-separated subset of {','.join(ABLATION_VARIANTS)}")
    a.add_argument("--preset")
    a.add_argument("--iterations", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except optim.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, KeyError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
