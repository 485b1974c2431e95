"""``narf`` command line: dataset generation, both training stages, composition, rendering, estimation, evaluation.

Every command writes a run record (``*.run.json``) with its argv, resolved
parameters, seeds, package version and timings; ``narf replay RECORD``
re-executes it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("narf")

RUN_RECORD_VERSION = 1


class CliError(Exception):
    """Validation failure reported to the user with exit code 1."""


# -- helpers ----------------------------------------------------------------------

def _version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _threads(args) -> int:
    import torch

    n = args.threads or int(os.environ.get("NARF_THREADS", "0") or 0)
    if n > 0:
        torch.set_num_threads(n)
    return torch.get_num_threads()


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    paths = sorted(p for p in path.rglob("*") if p.is_file() and not p.name.endswith("run.json")) \
        if path.is_dir() else [path]
    for p in paths:
        h.update(str(p.relative_to(path) if path.is_dir() else p.name).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _write_record(path: Path, args, argv, params: dict, timings: dict, outputs: list) -> Path:
    record = {
        "version": RUN_RECORD_VERSION,
        "narf_version": _version(),
        "command": args.command,
        "argv": list(argv),
        "params": params,
        "seed": getattr(args, "seed", None),
        "threads": args.resolved_threads,
        "timings": timings,
        "outputs": {str(p): _digest(Path(p)) for p in outputs if Path(p).exists()},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=1, sort_keys=True))
    return path


def _json_arg(text: str):
    """Inline JSON or a path to a JSON file."""
    p = Path(text)
    if p.suffix == ".json" and p.exists():
        return json.loads(p.read_text())
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"not valid JSON or a JSON file: {text!r}") from exc


def _floats(text: str | None):
    if text is None:
        return None
    text = text.strip()
    if text.startswith("["):
        return [float(v) for v in json.loads(text)]
    return [float(v) for v in text.split(",") if v.strip()]


def _model_from(path: str | None, fallback_doc: dict | None = None):
    from .articulation import load_model, parse_model
    from .scenes import SCENES

    if path in SCENES:
        return parse_model(SCENES[path]())
    if path:
        if not Path(path).exists():
            raise CliError(f"model file not found: {path}")
        return load_model(path)
    if fallback_doc is not None:
        return parse_model(fallback_doc)
    raise CliError("no articulation model given (use --model)")


def _hp(args, **overrides):
    from .pipeline import TrainingConfig

    base = TrainingConfig(**overrides)
    if getattr(args, "hp", None):
        base = TrainingConfig.from_dict({**base.to_dict(), **_json_arg(args.hp)})
    changes = {k: getattr(args, k) for k in ("iterations", "batch_rays", "n_samples", "lr") if getattr(args, k, None)}
    changes["seed"] = args.seed
    return TrainingConfig.from_dict({**base.to_dict(), **changes})


def _camera_template(resolution: int, focal: float | None):
    from .camera import Camera

    return Camera.default(resolution=resolution, focal=focal or float(resolution))


# -- commands ----------------------------------------------------------------------

def cmd_generate(args):
    from .synthgen import model_geometry, sample_training_set, write_dataset

    cfg = _json_arg(args.config) if args.config else {}
    scene = cfg.get("model", args.model or "clamp")
    model = _model_from(scene) if isinstance(scene, str) else _model_from(None, scene)
    seed = int(cfg.get("seed", args.seed))
    n_views = int(cfg.get("n_views", args.n_views))
    configs = cfg.get("configs") or ([_floats(args.configs)] if args.configs else [list(0.5 * (model.lower + model.upper))])
    radius = float(cfg.get("camera_radius", args.camera_radius))
    res = int(cfg.get("resolution", args.resolution))
    cam = _camera_template(res, cfg.get("focal", args.focal))
    frames = sample_training_set(model, model_geometry(model), n_views, configs, radius, seed, cam)
    params = {"model": model.to_dict(), "seed": seed, "n_views": n_views, "configs": configs,
              "camera_radius": radius, "resolution": res, "focal": cam.fx}
    write_dataset(args.out, frames, {"model": model.to_dict(), "generator": params})
    return params, [Path(args.out)]


def cmd_train_parts(args):
    from .field import save_checkpoint
    from .synthgen import model_geometry, read_dataset, read_manifest

    manifest = read_manifest(args.data)
    model = _model_from(args.model, manifest.get("model"))
    frames = read_dataset(args.data)
    hp = _hp(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    parts = args.parts.split(",") if args.parts else model.part_ids
    summary, outputs = {}, []
    from .pipeline import train_part

    for pid in parts:
        res = train_part(frames, pid, model, model_geometry(model), hp, progress=args.verbose)
        path = save_checkpoint(out / f"{pid}.ckpt", res.field, {"kind": "part", "part": pid, "model": model.to_dict(),
                                                                 "hp": hp.to_dict()})
        summary[pid] = {"final_loss": float(np.mean(res.loss_trace[-50:])) if res.loss_trace else None,
                        "seconds": res.seconds}
        outputs.append(path)
        if res.loss_trace:
            from .plotting import loss_curve
            outputs.append(loss_curve(res.loss_trace, out / f"{pid}_loss.png"))
    (out / "model.json").write_text(json.dumps(model.to_dict(), indent=1))
    return {"hp": hp.to_dict(), "parts": summary}, outputs


def _load_part_fields(directory: Path, model):
    from .field import load_checkpoint

    fields = {}
    for pid in model.part_ids:
        path = directory / f"{pid}.ckpt"
        if not path.exists():
            raise CliError(f"missing part checkpoint {path}")
        fields[pid] = load_checkpoint(path)[0]
    return fields


def cmd_composite(args):
    from .pipeline import composite
    from .synthgen import write_dataset

    parts_dir = Path(args.parts)
    model_path = args.model or (str(parts_dir / "model.json") if (parts_dir / "model.json").exists() else None)
    model = _model_from(model_path)
    fields = _load_part_fields(parts_dir, model)
    cam = _camera_template(args.resolution, args.focal)
    holdout = [_floats(h) for h in args.holdout] if args.holdout else None
    comps = composite(fields, model, args.n, args.camera_radius, args.seed, cam, upper_only=args.upper_only,
                      render_samples=args.n_samples, holdout=holdout, holdout_radius=args.holdout_radius,
                      progress=args.verbose)
    params = {"n": args.n, "seed": args.seed, "camera_radius": args.camera_radius, "upper_only": args.upper_only,
              "render_samples": args.n_samples, "holdout": holdout, "holdout_radius": args.holdout_radius}
    write_dataset(args.out, comps, {"model": model.to_dict(), "composite": params})
    return params, [Path(args.out)]


def cmd_train_config(args):
    from .field import save_checkpoint
    from .pipeline import train_config
    from .plotting import loss_curve
    from .synthgen import model_geometry, read_dataset, read_manifest

    manifest = read_manifest(args.composites)
    model = _model_from(args.model, manifest.get("model"))
    comps = read_dataset(args.composites)
    hp = _hp(args, iterations=40000)
    res = train_config(comps, model, model_geometry(model), hp, progress=args.verbose)
    out = Path(args.out)
    save_checkpoint(out, res.field, {"kind": "config", "model": model.to_dict(), "hp": hp.to_dict()})
    outputs = [out]
    if res.loss_trace:
        outputs.append(loss_curve(res.loss_trace, out.with_suffix(".loss.png")))
    return {"hp": hp.to_dict(), "seconds": res.seconds,
            "final_loss": float(np.mean(res.loss_trace[-50:])) if res.loss_trace else None}, outputs


def _camera_arg(args):
    from .camera import Camera, look_at

    if args.camera:
        return Camera.from_dict(_json_arg(args.camera))
    eye = _floats(args.eye) or [0.6, -0.6, 0.5]
    return _camera_template(args.resolution, args.focal).with_pose(look_at(eye))


def cmd_render(args):
    from PIL import Image

    from .articulation import RigidTransform
    from .field import load_checkpoint, render
    from .synthgen import to_uint8

    fld, extra = load_checkpoint(args.ckpt)
    pose = RigidTransform.from_dict(_json_arg(args.pose)) if args.pose else RigidTransform.identity()
    config = _floats(args.config)
    if fld.n_config and config is None:
        config = list(0.5 * (fld.config_lower + fld.config_upper))
    cam = _camera_arg(args)
    t0 = time.perf_counter()
    rgb, alpha, depth = render(fld, cam, pose, config if fld.n_config else None, n_samples=args.n_samples).image(cam)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(rgb), mode="RGB").save(out)
    return {"pose": pose.to_dict(), "config": config, "camera": cam.to_dict(), "n_samples": args.n_samples,
            "render_seconds": time.perf_counter() - t0}, [out]


def cmd_estimate(args):
    from .articulation import RigidTransform, parse_model
    from .estimation import estimate, perturb_pose
    from .field import load_checkpoint, render
    from .plotting import estimation_traces, image_rows
    from .synthgen import model_geometry, read_dataset

    fld, extra = load_checkpoint(args.ckpt)
    frames = read_dataset(args.data)
    if not 0 <= args.frame < len(frames):
        raise CliError(f"frame index {args.frame} out of range (dataset has {len(frames)} frames)")
    fr = frames[args.frame]
    mask = fr.part_mask > 0
    if not mask.any():
        raise CliError(f"frame {args.frame} has an empty mask")
    if args.init_pose in (None, "perturb"):
        init = perturb_pose(fr.object_pose, args.rot_deg, args.trans_m, seed=args.seed)
    else:
        init = RigidTransform.from_dict(_json_arg(args.init_pose))
    model = parse_model(extra["model"]) if "model" in extra else None
    geometry = model_geometry(model) if model else None
    rep = estimate(fld, fr.rgb, mask, fr.camera, init, iterations=args.iters, lr_config=args.lr_config,
                   lr_pose=args.lr_pose, pixel_budget=args.pixel_budget, seed=args.seed, n_samples=args.n_samples,
                   truth=(fr.object_pose, fr.config), model=model, geometry=geometry)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    body = {**rep.to_dict(), "frame": args.frame, "initial_pose": init.to_dict(),
            "truth": {"pose": fr.object_pose.to_dict(), "config": fr.config.tolist()}}
    report.write_text(json.dumps(body, indent=1))
    csv_path = report.with_suffix(".csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss", *[f"config_{k}" for k in range(fld.n_config)]])
        for i, loss in enumerate(rep.loss_trace):
            cfg = rep.config_trace[min(i, len(rep.config_trace) - 1)]
            w.writerow([i, f"{loss:.9g}", *[f"{c:.9g}" for c in cfg]])
    traces = estimation_traces(rep.loss_trace, np.asarray(rep.config_trace), report.with_suffix(".trace.png"),
                               truth=fr.config, names=list(model.dof_order) if model else None)
    cfg_or_none = lambda c: c if fld.n_config else None  # noqa: E731
    before = render(fld, fr.camera, init, cfg_or_none(rep.config_trace[0]), n_samples=args.n_samples).image(fr.camera)[0]
    after = render(fld, fr.camera, rep.pose, cfg_or_none(rep.config), n_samples=args.n_samples).image(fr.camera)[0]
    target = np.where(mask[..., None], fr.rgb, 1.0)
    images = image_rows([[target, before, after, np.abs(after - target).mean(-1) * 4]],
                        ["observation", "initial", "final", "error x4"], report.with_suffix(".png"))
    params = {"frame": args.frame, "iters": args.iters, "lr_pose": args.lr_pose, "lr_config": args.lr_config,
              "pixel_budget": args.pixel_budget, "rot_deg": args.rot_deg, "trans_m": args.trans_m,
              "add": rep.add, "config_error": rep.config_error, "diverged": rep.diverged}
    return params, [report, csv_path, traces, images]


def cmd_evaluate(args):
    from .field import load_checkpoint
    from .pipeline import evaluate_renders, render_frame
    from .plotting import image_rows, mse_histogram
    from .articulation import parse_model
    from .synthgen import read_dataset

    fld, extra = load_checkpoint(args.ckpt)
    frames = read_dataset(args.data)
    model = parse_model(extra["model"]) if "model" in extra else None
    result = evaluate_renders(fld, frames, args.n_samples, model)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(json.dumps(result, indent=1))
    csv_path = report.with_suffix(".csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "mse", "mask_pixels"])
        for row in result["frames"]:
            w.writerow([row["index"], f"{row['mse']:.9g}", row["mask_pixels"]])
    hist = mse_histogram([r["mse"] for r in result["frames"]], report.with_suffix(".hist.png"), args.threshold)
    rows = []
    for row in sorted(result["frames"], key=lambda r: r["mse"])[-min(4, len(frames)):]:
        fr = frames[row["index"]]
        img = render_frame(fld, fr, args.n_samples, model)
        rows.append([fr.rgb, img, np.abs(img - fr.rgb).mean(-1) * 4])
    grid = image_rows(rows, ["oracle", "render", "error x4"], report.with_suffix(".png")) if rows else None
    return {"mean_mse": result["mean_mse"], "n_frames": result["n_frames"]}, [report, csv_path, hist, grid]


def cmd_replay(args):
    record = json.loads(Path(args.record).read_text())
    argv = record["argv"]
    log.info("replaying: narf %s", " ".join(argv))
    code = main(argv)
    if code:
        raise CliError(f"replayed command exited with {code}")
    return {"replayed": args.record}, []


# -- parser -----------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="seed for every stochastic step (default 0)")
    p.add_argument("--threads", type=int, default=0, help="torch threads; 1 forces bit-determinism (env NARF_THREADS)")
    p.add_argument("--record", help="run record path (default: next to the main output)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_training(p):
    p.add_argument("--hp", help="hyperparameters as JSON text or a .json file")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-rays", dest="batch_rays", type=int)
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.add_argument("--lr", type=float)


def _add_camera(p, default_res=64):
    p.add_argument("--resolution", type=int, default=default_res)
    p.add_argument("--focal", type=float, default=None, help="focal length in pixels (default: resolution)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="narf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"narf {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("generate", help="raytrace a labelled synthetic dataset")
    p.add_argument("--config", help="run config JSON (model, n_views, configs, seed, camera_radius, resolution, focal)")
    p.add_argument("--model", help="model JSON file or built-in scene name (clamp, block)")
    p.add_argument("--n-views", dest="n_views", type=int, default=100)
    p.add_argument("--configs", help="one configuration, comma separated")
    p.add_argument("--camera-radius", dest="camera_radius", type=float, default=1.0)
    _add_camera(p)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-parts", help="train one configuration-free field per rigid part")
    p.add_argument("--model", help="model JSON (default: the one stored in the dataset manifest)")
    p.add_argument("--data", required=True)
    p.add_argument("--parts", help="comma separated subset of part ids")
    p.add_argument("--out", required=True, help="checkpoint directory")
    _add_training(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_parts)

    p = sub.add_parser("composite", help="render and merge part fields into a configuration-spanning dataset")
    p.add_argument("--parts", required=True, help="part checkpoint directory")
    p.add_argument("--model")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--camera-radius", dest="camera_radius", type=float, default=1.0)
    p.add_argument("--upper-only", dest="upper_only", action="store_true", help="cameras on the upper hemisphere only")
    p.add_argument("--n-samples", dest="n_samples", type=int, default=64)
    p.add_argument("--holdout", action="append", help="configuration kept out of the set (repeatable)")
    p.add_argument("--holdout-radius", dest="holdout_radius", type=float, default=0.0)
    _add_camera(p)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_composite)

    p = sub.add_parser("train-config", help="train the configuration-aware field on composites")
    p.add_argument("--composites", required=True)
    p.add_argument("--model")
    p.add_argument("--out", required=True)
    _add_training(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_config)

    p = sub.add_parser("render", help="render a checkpoint to a PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pose", help="object pose JSON {xyzw, t}")
    p.add_argument("--config", help="joint values, comma separated")
    p.add_argument("--camera", help="camera JSON (intrinsics + pose); overrides --eye")
    p.add_argument("--eye", help="camera position looking at the origin, comma separated")
    p.add_argument("--n-samples", dest="n_samples", type=int, default=64)
    _add_camera(p)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("estimate", help="refine pose and configuration against one dataset frame")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--frame", type=int, default=0, help="manifest entry index")
    p.add_argument("--init-pose", dest="init_pose", help="initial pose JSON, or 'perturb' (default)")
    p.add_argument("--rot-deg", dest="rot_deg", type=float, default=10.0)
    p.add_argument("--trans-m", dest="trans_m", type=float, default=0.02)
    p.add_argument("--iters", type=int, default=150)
    p.add_argument("--lr-pose", dest="lr_pose", type=float, default=0.001)
    p.add_argument("--lr-config", dest="lr_config", type=float, default=0.01)
    p.add_argument("--pixel-budget", dest="pixel_budget", type=int, default=1024)
    p.add_argument("--n-samples", dest="n_samples", type=int, default=64)
    p.add_argument("--report", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", help="per-frame masked MSE of a checkpoint against a labelled dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-samples", dest="n_samples", type=int, default=64)
    p.add_argument("--threshold", type=float, default=0.01, help="reference line in the histogram")
    p.add_argument("--report", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("replay", help="re-run a command from its run record")
    p.add_argument("record")
    _add_common(p)
    p.set_defaults(func=cmd_replay)
    return parser


def _record_path(args) -> Path:
    if args.record:
        return Path(args.record)
    main_out = getattr(args, "out", None) or getattr(args, "report", None)
    if main_out is None:
        return Path(f"{args.command}.run.json")
    p = Path(main_out)
    return p / "run.json" if (p.is_dir() or not p.suffix) else p.with_suffix(p.suffix + ".run.json")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on unknown commands / bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    args.resolved_threads = _threads(args)
    from .articulation import ModelError
    from .field import DegenerateFieldError

    t0 = time.perf_counter()
    try:
        params, outputs = args.func(args)
    except (CliError, ModelError, DegenerateFieldError, ValueError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"narf {args.command}: error: {msg}", file=sys.stderr)
        return 1
    timings = {"total_seconds": time.perf_counter() - t0}
    if args.command != "replay":
        _write_record(_record_path(args), args, argv, params, timings, [o for o in outputs if o is not None])
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
