"""Command-line entry point: ``keyrender <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

# flag types for PipelineConfig fields whose default is None
_OPTIONAL_TYPES = {
    "budget": int, "trajectory_file": str, "sweep_deg": float, "keyframe_count": int,
    "density_checkpoint": str, "keyframe_dir": str, "voxel_size": float,
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    from .pipeline import PipelineConfig

    p.add_argument("--config", help="JSON config file; flags override its values")
    for f in fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "resolution":
            p.add_argument(flag, type=int, nargs=2, metavar=("W", "H"), default=None)
        elif isinstance(f.default, bool):
            p.add_argument(flag, action=argparse.BooleanOptionalAction, default=None)
        else:
            typ = _OPTIONAL_TYPES.get(f.name) or type(f.default)
            p.add_argument(flag, type=typ, default=None)


def _config_from_args(args):
    from .pipeline import PipelineConfig

    names = {f.name for f in fields(PipelineConfig)}
    overrides = {k: v for k, v in vars(args).items() if k in names and v is not None}
    return PipelineConfig.load(args.config, overrides)


def _print(obj) -> None:
    print(json.dumps(obj, indent=1))


# -- subcommands -----------------------------------------------------------------


def cmd_gen_scene(args) -> int:
    from .gaussians import write_splat
    from .synth import generate_scene

    scene = generate_scene(args.recipe, args.seed, args.budget)
    write_splat(args.out, scene)
    _print({"gaussians": len(scene), "bounds": np.asarray(scene.bounds).tolist(), "out": args.out})
    return EXIT_OK


def _scene_for(args):
    from .gaussians import GaussianScene, read_splat
    from .synth import generate_scene

    if getattr(args, "scene", None):
        s = read_splat(args.scene)
        # SPLAT files carry no recipe box; trajectories then frame the splat extent
        return GaussianScene(s.means, s.scales, s.rotations, s.opacities, s.colors, s.background,
                             np.stack([s.means.min(0), s.means.max(0)]))
    return generate_scene(args.recipe, args.scene_seed, args.budget)


def cmd_gen_traj(args) -> int:
    from .geometry import write_pose_file
    from .synth import generate_trajectory

    scene = _scene_for(args)
    traj = generate_trajectory(args.kind, args.duration, args.fps, args.seed, scene.bounds,
                               resolution=tuple(args.resolution), fov_deg=args.fov, sweep_deg=args.sweep_deg)
    write_pose_file(args.out, traj)
    _print({"frames": len(traj), "fps": traj.fps, "out": args.out})
    return EXIT_OK


def cmd_labels(args) -> int:
    from .density.labels import build_label_dataset, default_label_jobs, label_keyframes
    from .geometry import read_pose_file

    if args.trajectory:
        rep = label_keyframes(_scene_for(args), read_pose_file(args.trajectory), args.tau, args.stride,
                              args.splat_radius, args.label_resolution)
        Path(args.out).write_text(rep.to_json())
        _print({"count": rep.count, "out": args.out})
        return EXIT_OK
    jobs = default_label_jobs(args.count, args.seed, tuple(args.recipes), tuple(args.kinds), args.budget)
    data = build_label_dataset(jobs, args.tau, args.stride, args.splat_radius, args.label_resolution,
                               args.descriptor_dim)
    records = [dict(asdict(j), n_gt=int(s.n_gt), descriptor=[float(v) for v in s.descriptor])
               for j, s in zip(jobs, data)]
    Path(args.out).write_text(json.dumps({"tau": args.tau, "stride": args.stride, "splat_radius": args.splat_radius,
                                          "label_resolution": args.label_resolution, "samples": records}, indent=1))
    counts = [r["n_gt"] for r in records]
    _print({"samples": len(records), "min": min(counts), "max": max(counts), "out": args.out})
    return EXIT_OK


def load_label_file(path):
    """Rebuild ``DensitySample`` objects from a label JSON file (trajectories are regenerated)."""
    from .density.labels import DensitySample, LabelJob
    from .errors import ConfigError
    from .synth import generate_scene, generate_trajectory

    try:
        recs = json.loads(Path(path).read_text())["samples"]
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read label file {path}: {exc}") from exc
    job_names = {f.name for f in fields(LabelJob)}
    bounds: dict[tuple, np.ndarray] = {}
    out = []
    for r in recs:
        job = LabelJob(**{k: v for k, v in r.items() if k in job_names})
        key = (job.recipe, job.scene_seed, job.budget)
        if key not in bounds:
            bounds[key] = generate_scene(job.recipe, job.scene_seed, job.budget).bounds
        traj = generate_trajectory(job.kind, job.duration_s, job.fps, job.traj_seed, bounds[key], sweep_deg=job.sweep_deg)
        out.append(DensitySample(traj, np.asarray(r["descriptor"], dtype=float), int(r["n_gt"])))
    return out


def cmd_train_density(args) -> int:
    from .density.model import DensityConfig, DensityModelParams
    from .density.train import train

    data = load_label_file(args.labels)
    cfg = DensityConfig(width=args.width, heads=args.heads, layers=args.layers, ff_mult=args.ff_mult,
                        descriptor_dim=len(data[0].descriptor), max_tokens=args.max_tokens)
    params = DensityModelParams.initialize(cfg, args.seed)
    res = train(params, data, lr=args.lr, batch_size=args.batch_size, steps=args.steps, seed=args.seed,
                weight_decay=args.weight_decay)
    res.params.save(args.out)
    res.write_loss_csv(Path(args.out).with_suffix(".loss.csv"))
    _print({"initial_loss": res.initial_loss, "final_loss": res.final_loss, "out": args.out})
    return EXIT_OK


def cmd_predict_density(args) -> int:
    from .density.model import DensityModelParams, count_from_output, forward
    from .geometry import read_pose_file
    from .synth import scene_descriptor

    params = DensityModelParams.load(args.checkpoint)
    traj = read_pose_file(args.trajectory)
    y = forward(params, traj, scene_descriptor(_scene_for(args), params.config.descriptor_dim))
    _print({"output": y, "keyframes": count_from_output(y, len(traj)), "frames": len(traj)})
    return EXIT_OK


def cmd_run(args) -> int:
    from .pipeline import run_pipeline

    res = run_pipeline(_config_from_args(args))
    _print(json.loads((res.output_dir / "summary.json").read_text()))
    return EXIT_OK


def cmd_rerender(args) -> int:
    from .pipeline import rerender_trajectory

    res = rerender_trajectory(args.manifest, args.poses, args.out, args.resolution, keep_frames=False,
                              sidecars=args.sidecars)
    n = len(res.assignment)
    _print({"frames": n, "seconds": res.seconds, "fps": n / res.seconds if res.seconds > 0 else None,
            "out": args.out})
    return EXIT_OK


def cmd_bench(args) -> int:
    from .metrics import STAGES
    from .pipeline import bench

    rep = bench(_config_from_args(args), args.repetitions)
    _print({"stages": {s: {"median": rep.median(s), "iqr": rep.iqr(s)} for s in STAGES},
            "total_median": rep.total_median, "generation_fps": rep.generation_fps,
            "keyframes": rep.keyframe_count, "frames": rep.n_frames, "keyframe_fraction": rep.keyframe_fraction})
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import format_db
    from .pipeline import evaluate_frames

    rec = evaluate_frames(args.frames, args.reference, args.out)
    _print({"frames": rec.n_frames, "mean_psnr": format_db(rec.mean_psnr), "mean_hole": rec.mean_hole})
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .density.labels import LABEL_RESOLUTION, LABEL_STRIDE
    from .keyframes import DEFAULT_SPLAT_RADIUS, DEFAULT_TAU

    ap = argparse.ArgumentParser(prog="keyrender", description="Sparse-keyframe reconstruct-and-render pipeline.")
    sub = ap.add_subparsers(dest="command", required=True)

    def scene_flags(p):
        p.add_argument("--scene", help="SPLATv1 scene file (otherwise generated from --recipe)")
        p.add_argument("--recipe", default="room")
        p.add_argument("--scene-seed", type=int, default=0)
        p.add_argument("--budget", type=int, default=None)

    p = sub.add_parser("gen-scene", help="write a synthetic SPLATv1 scene")
    p.add_argument("--recipe", default="room")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("gen-traj", help="write a camera trajectory pose file")
    scene_flags(p)
    p.add_argument("--kind", default="orbit")
    p.add_argument("--duration", type=float, default=20.0)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sweep-deg", type=float, default=None)
    p.add_argument("--resolution", type=int, nargs=2, default=(256, 256), metavar=("W", "H"))
    p.add_argument("--fov", type=float, default=70.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_traj)

    p = sub.add_parser("labels", help="coverage-selection keyframe labels (one trajectory or a dataset)")
    scene_flags(p)
    p.add_argument("--trajectory", help="label this pose file instead of building a dataset")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--recipes", nargs="+", default=["room"])
    p.add_argument("--kinds", nargs="+", default=["orbit", "dolly"])
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--stride", type=int, default=LABEL_STRIDE)
    p.add_argument("--splat-radius", type=int, default=DEFAULT_SPLAT_RADIUS)
    p.add_argument("--label-resolution", type=int, default=LABEL_RESOLUTION)
    p.add_argument("--descriptor-dim", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_labels)

    p = sub.add_parser("train-density", help="train the keyframe-density predictor")
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (a .json manifest is written beside it)")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--ff-mult", type=int, default=4)
    p.add_argument("--max-tokens", type=int, default=32)
    p.set_defaults(func=cmd_train_density)

    p = sub.add_parser("predict-density", help="predict a keyframe count for a trajectory")
    scene_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trajectory", required=True)
    p.set_defaults(func=cmd_predict_density)

    p = sub.add_parser("run", help="run the full pipeline")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("rerender", help="render a new trajectory from a saved reconstruction")
    p.add_argument("--manifest", required=True, help="manifest.json or its directory")
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, nargs=2, default=None, metavar=("W", "H"))
    p.add_argument("--sidecars", action="store_true")
    p.set_defaults(func=cmd_rerender)

    p = sub.add_parser("bench", help="repeat the pipeline and report per-stage medians")
    _add_config_flags(p)
    p.add_argument("--repetitions", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="PSNR between two frame directories")
    p.add_argument("--frames", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", help="per-frame CSV")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    from .errors import ConfigError, MissingManifest, StageFailure, UnknownKind, UnknownRecipe

    args = build_parser().parse_args(argv)
    warnings.filterwarnings("ignore", message=".*TBB.*")
    try:
        return args.func(args)
    except (ConfigError, UnknownRecipe, UnknownKind, MissingManifest, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # any other failure inside a stage
        print(f"stage failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
