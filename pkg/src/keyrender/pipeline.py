"""End-to-end orchestration: density prediction, keyframes, reconstruction, alignment, rendering, metrics."""

from __future__ import annotations

import csv
import json
import shutil
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .align import AlignedReconstruction, align_chunks, load_aligned, make_chunk_plan, reconstruct_chunk
from .density.labels import LABEL_RESOLUTION, LABEL_STRIDE, label_keyframes
from .density.model import DensityModelParams, predict_count
from .errors import ConfigError, MissingManifest, StageFailure
from .gaussians import GaussianScene
from .geometry import Trajectory, read_pose_file, rotation_angle, write_pose_file
from .keyframes import DEFAULT_SPLAT_RADIUS, DEFAULT_TAU, DEFAULT_WINDOW, KeyframePlan, plan_keyframes
from .metrics import STAGES, MetricsRecord, hole_fraction, psnr
from .render import RenderedFrame, frame_assignment, iter_render_video, read_ppm, read_sidecar, render, write_frame
from .synth import (RECIPES, TRAJECTORY_KINDS, Corruption, Keyframe, generate_scene, generate_trajectory,
                    oracle_keyframes, scene_descriptor)

COUNT_SOURCES = ("auto", "fixed", "predict", "label")
KEYFRAME_SOURCES = ("oracle", "files")


@dataclass
class PipelineConfig:
    """Every knob of a pipeline run.  ``resolution`` is ``[width, height]``."""

    recipe: str = "room"
    scene_seed: int = 0
    budget: int | None = None
    trajectory: str = "orbit"
    trajectory_file: str | None = None
    traj_seed: int = 0
    duration_s: float = 20.0
    fps: float = 30.0
    sweep_deg: float | None = None
    fov_deg: float = 70.0
    resolution: tuple[int, int] = (256, 256)
    tau: float = DEFAULT_TAU
    splat_radius: int = DEFAULT_SPLAT_RADIUS
    label_stride: int = LABEL_STRIDE
    label_resolution: int = LABEL_RESOLUTION
    count_source: str = "auto"
    keyframe_count: int | None = None
    density_checkpoint: str | None = None
    window: int = DEFAULT_WINDOW
    keyframe_source: str = "oracle"
    keyframe_dir: str | None = None
    corruption: str = "none"
    corruption_seed: int = 0
    chunk_duration_s: float = 10.0
    voxel_size: float | None = None
    output_dir: str = "run"
    write_frames: bool = True
    sidecars: bool = False
    evaluate: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        d = dict(d)
        if "resolution" in d and d["resolution"] is not None:
            d["resolution"] = tuple(int(v) for v in d["resolution"])
        return cls(**d)

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "PipelineConfig":
        """JSON file (optional) with ``overrides`` applied on top; overrides win."""
        d: dict[str, Any] = {}
        if path is not None:
            try:
                d = json.loads(Path(path).read_text())
            except FileNotFoundError as exc:
                raise ConfigError(f"config file {path} not found") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
            if not isinstance(d, dict):
                raise ConfigError("config file must hold a JSON object")
        d.update({k: v for k, v in (overrides or {}).items() if v is not None})
        cfg = cls.from_dict(d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.recipe in RECIPES, f"recipe must be one of {RECIPES}")
        need(self.trajectory in TRAJECTORY_KINDS, f"trajectory must be one of {TRAJECTORY_KINDS}")
        need(self.duration_s > 0 and self.fps > 0, "duration_s and fps must be positive")
        need(len(self.resolution) == 2 and min(self.resolution) > 0, "resolution must be two positive integers")
        need(0 < self.fov_deg < 180, "fov_deg must lie in (0, 180)")
        need(0.0 <= self.tau <= 1.01, "tau must lie in [0, 1.01]")
        need(self.splat_radius >= 0, "splat_radius must be >= 0")
        need(self.label_stride >= 1 and self.label_resolution >= 8, "label_stride >= 1 and label_resolution >= 8")
        need(self.count_source in COUNT_SOURCES, f"count_source must be one of {COUNT_SOURCES}")
        need(self.keyframe_source in KEYFRAME_SOURCES, f"keyframe_source must be one of {KEYFRAME_SOURCES}")
        need(self.window >= 2, "window must be >= 2")
        need(self.chunk_duration_s > 0, "chunk_duration_s must be positive")
        need(self.voxel_size is None or self.voxel_size > 0, "voxel_size must be positive")
        need(self.keyframe_count is None or self.keyframe_count >= 1, "keyframe_count must be >= 1")
        if self.count_source == "fixed":
            need(self.keyframe_count is not None, "count_source 'fixed' needs keyframe_count")
        if self.count_source == "predict":
            need(self.density_checkpoint is not None, "count_source 'predict' needs density_checkpoint")
        if self.density_checkpoint is not None:
            need(Path(self.density_checkpoint).is_file(), f"density checkpoint {self.density_checkpoint} not found")
        if self.trajectory_file is not None:
            need(Path(self.trajectory_file).is_file(), f"trajectory file {self.trajectory_file} not found")
        if self.keyframe_source == "files":
            need(self.keyframe_dir is not None and Path(self.keyframe_dir).is_dir(),
                 "keyframe_source 'files' needs an existing keyframe_dir")
        try:
            Corruption.parse(self.corruption)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def resolved_count_source(self) -> str:
        if self.count_source != "auto":
            return self.count_source
        if self.keyframe_count is not None:
            return "fixed"
        if self.density_checkpoint is not None:
            return "predict"
        return "label"


# -- inputs ----------------------------------------------------------------------


def build_inputs(cfg: PipelineConfig) -> tuple[GaussianScene, Trajectory]:
    scene = generate_scene(cfg.recipe, cfg.scene_seed, cfg.budget)
    if cfg.trajectory_file is not None:
        traj = read_pose_file(cfg.trajectory_file)
    else:
        traj = generate_trajectory(cfg.trajectory, cfg.duration_s, cfg.fps, cfg.traj_seed, scene.bounds,
                                   resolution=tuple(cfg.resolution), fov_deg=cfg.fov_deg, sweep_deg=cfg.sweep_deg)
    return scene, traj


def write_keyframes(directory, keyframes: list[Keyframe], indices) -> None:
    """Keyframe images as PPM plus alpha/depth sidecars and a pose file."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, kf in enumerate(keyframes):
        write_frame(d, k, RenderedFrame(kf.image, kf.alpha, kf.depth), sidecars=True)
    write_pose_file(d / "poses.txt", Trajectory(tuple(kf.pose for kf in keyframes), 1.0))
    (d / "indices.json").write_text(json.dumps([int(i) for i in indices]))


def read_keyframes(directory) -> list[Keyframe]:
    d = Path(directory)
    poses = read_pose_file(d / "poses.txt")
    out = []
    for k, pose in enumerate(poses):
        img = read_ppm(d / f"frame_{k:05d}.ppm").astype(float) / 255.0
        res = (img.shape[1], img.shape[0])
        alpha = read_sidecar(d / f"frame_{k:05d}.alpha.f32", res)
        depth = read_sidecar(d / f"frame_{k:05d}.depth.f32", res)
        out.append(Keyframe(img, depth, alpha, pose))
    return out


# -- the run ---------------------------------------------------------------------


@dataclass
class PipelineResult:
    metrics: MetricsRecord
    output_dir: Path
    plan: KeyframePlan
    count_source: str
    manifest: Path


class _Stage:
    """Times a block and converts any failure into ``StageFailure``."""

    def __init__(self, metrics: MetricsRecord | None, name: str):
        self.metrics, self.name = metrics, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, et, ev, tb):
        if self.metrics is not None and self.name in self.metrics.stage_seconds:
            self.metrics.stage_seconds[self.name] += time.perf_counter() - self.t0
        if ev is not None and not isinstance(ev, StageFailure) and isinstance(ev, Exception):
            raise StageFailure(self.name, ev) from ev
        return False


def decide_keyframe_count(cfg: PipelineConfig, scene: GaussianScene, traj: Trajectory) -> tuple[int, str]:
    source = cfg.resolved_count_source()
    if source == "fixed":
        k = int(cfg.keyframe_count)
    elif source == "predict":
        params = DensityModelParams.load(cfg.density_checkpoint)
        k = predict_count(params, traj, scene_descriptor(scene, params.config.descriptor_dim))
    else:
        rep = label_keyframes(scene, traj, cfg.tau, cfg.label_stride, cfg.splat_radius, cfg.label_resolution)
        k = rep.count
    if source != "fixed":
        n = len(traj)
        k = 1 if n == 1 else min(max(k, 2), n)
    return k, source


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    """Run every stage in order, writing artifacts under ``cfg.output_dir``.

    Layout: ``config.json``, ``trajectory.txt``, ``keyframes.json``, ``keyframes/``,
    ``recon/`` (chunk SPLAT files and ``manifest.json``), ``frames/``,
    ``stages.csv``, ``frames.csv`` and ``summary.json``.
    """
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    res = tuple(int(v) for v in cfg.resolution)
    metrics = MetricsRecord()

    with _Stage(None, "setup"):
        scene, traj = build_inputs(cfg)
        write_pose_file(out / "trajectory.txt", traj)
        # render exactly what a later rerender will read back from disk
        traj = read_pose_file(out / "trajectory.txt")
    metrics.n_frames = len(traj)

    with _Stage(metrics, "density-predict"):
        K, source = decide_keyframe_count(cfg, scene, traj)
        plan = plan_keyframes(len(traj), K, cfg.window)
        (out / "keyframes.json").write_text(plan.to_json())
    metrics.keyframe_count = K

    with _Stage(metrics, "keyframe-provide"):
        if cfg.keyframe_source == "oracle":
            poses = [traj[i] for i in plan.indices]
            keyframes = oracle_keyframes(scene, poses, res, cfg.corruption, cfg.corruption_seed)
            write_keyframes(out / "keyframes", keyframes, plan.indices)
        else:
            keyframes = read_keyframes(cfg.keyframe_dir)
            if len(keyframes) != K:
                raise StageFailure("keyframe-provide", ValueError(f"{len(keyframes)} keyframe files for K={K}"))

    with _Stage(metrics, "reconstruct"):
        chunk_plan = make_chunk_plan(plan.indices, traj, cfg.chunk_duration_s)
        recs = [reconstruct_chunk([keyframes[k] for k in members], cfg.voxel_size, scene.background)
                for members in chunk_plan.keyframes]

    with _Stage(metrics, "align"):
        aligned = align_chunks(chunk_plan, recs, traj)
        assignment = frame_assignment(len(traj), chunk_plan.frame_ranges)
        manifest = aligned.save(out / "recon", extra={
            "trajectory": "../trajectory.txt",
            "frame_assignment": [int(a) for a in assignment],
            "resolution": list(res),
        })
        # the render stage consumes the persisted reconstruction
        aligned, _ = load_aligned(manifest)

    frames_dir = out / "frames"
    if cfg.write_frames:
        frames_dir.mkdir(exist_ok=True)
    psnrs = [] if cfg.evaluate else None
    for i, frame, dt in _render_stream(aligned, traj, res, assignment, metrics):
        if cfg.write_frames:
            write_frame(frames_dir, i, frame, cfg.sidecars)
        metrics.holes.append(hole_fraction(frame))
        if psnrs is not None:
            psnrs.append(psnr(frame.color, render(scene, traj[i], res).color))
    metrics.psnr = psnrs

    metrics.write_stage_csv(out / "stages.csv")
    metrics.write_frame_csv(out / "frames.csv")
    summary = metrics.summary()
    summary["count_source"] = source
    summary["chunks"] = len(chunk_plan)
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return PipelineResult(metrics, out, plan, source, manifest)


def _render_stream(aligned: AlignedReconstruction, traj, res, assignment, metrics) -> Iterator:
    it = iter_render_video(aligned.scenes, traj, res, transforms=aligned.transforms, assignment=assignment)
    while True:
        try:
            i, frame, dt = next(it)
        except StopIteration:
            return
        except Exception as exc:
            raise StageFailure("render", exc) from exc
        metrics.stage_seconds["render"] += dt
        yield i, frame, dt


# -- rerendering -----------------------------------------------------------------


def assign_to_original(new: Trajectory, original: Trajectory, original_assignment) -> np.ndarray:
    """Chunk index for each new pose via its nearest original frame.

    Nearest means smallest camera-center distance, then smallest rotation
    angle, then closest proportional time.
    """
    c0 = original.centers()
    q0 = original.poses
    n0, n = len(original), len(new)
    out = np.empty(n, dtype=np.int64)
    for i, p in enumerate(new.poses):
        d = np.linalg.norm(c0 - p.center, axis=1)
        cand = np.flatnonzero(d == d.min())
        if len(cand) > 1:
            ang = np.array([rotation_angle(p.rotation, q0[j].rotation) for j in cand])
            cand = cand[ang == ang.min()]
        if len(cand) > 1:
            t = i / (n - 1) * (n0 - 1) if n > 1 else 0.0
            cand = cand[[int(np.argmin(np.abs(cand - t)))]]
        out[i] = original_assignment[int(cand[0])]
    return out


@dataclass
class RerenderResult:
    frames: list[RenderedFrame] = field(default_factory=list)
    seconds: float = 0.0
    assignment: np.ndarray | None = None


def rerender_trajectory(manifest_path, poses, output_dir=None, resolution=None, keep_frames: bool = True,
                        sidecars: bool = False) -> RerenderResult:
    """Render a new trajectory (pose file or ``Trajectory``) from a saved reconstruction.

    Poses are expressed in the input-trajectory frame.  Each pose is routed to
    the chunk of its nearest original frame and mapped through that chunk's
    stored transform; nothing is reconstructed.
    """
    mpath = Path(manifest_path)
    if mpath.is_dir():
        mpath = mpath / "manifest.json"
    if not mpath.is_file():
        raise MissingManifest(f"no manifest at {mpath}")
    aligned, m = load_aligned(mpath)
    traj = poses if isinstance(poses, Trajectory) else read_pose_file(poses)
    res = tuple(resolution) if resolution is not None else tuple(m.get("resolution", (256, 256)))
    if "trajectory" in m and "frame_assignment" in m:
        original = read_pose_file(mpath.parent / m["trajectory"])
        assign = assign_to_original(traj, original, np.asarray(m["frame_assignment"]))
    else:
        assign = np.zeros(len(traj), dtype=np.int64)
    result = RerenderResult(assignment=assign)
    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
    for i, frame, dt in iter_render_video(aligned.scenes, traj, res, transforms=aligned.transforms, assignment=assign):
        result.seconds += dt
        if keep_frames:
            result.frames.append(frame)
        if output_dir is not None:
            write_frame(output_dir, i, frame, sidecars)
    return result


# -- benchmarking ----------------------------------------------------------------


@dataclass
class BenchReport:
    runs: list[dict[str, float]]
    n_frames: int
    keyframe_count: int

    def median(self, stage: str) -> float:
        return float(np.median([r[stage] for r in self.runs]))

    def iqr(self, stage: str) -> float:
        v = [r[stage] for r in self.runs]
        q1, q3 = np.percentile(v, [25, 75])
        return float(q3 - q1)

    @property
    def total_median(self) -> float:
        return float(np.median([sum(r.values()) for r in self.runs]))

    @property
    def generation_fps(self) -> float:
        t = self.total_median
        return self.n_frames / t if t > 0 else float("inf")

    @property
    def keyframe_fraction(self) -> float:
        return self.keyframe_count / self.n_frames

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "median_seconds", "iqr_seconds"])
            for s in STAGES:
                w.writerow([s, repr(self.median(s)), repr(self.iqr(s))])
            totals = [sum(r.values()) for r in self.runs]
            q1, q3 = np.percentile(totals, [25, 75])
            w.writerow(["total", repr(self.total_median), repr(float(q3 - q1))])
            w.writerow(["frames", self.n_frames, ""])
            w.writerow(["keyframes", self.keyframe_count, ""])
            w.writerow(["generation_fps", repr(self.generation_fps), ""])


def bench(cfg: PipelineConfig, repetitions: int = 3) -> BenchReport:
    """Repeat the pipeline (frames not written, no ground-truth evaluation) after one discarded warm-up."""
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    base = Path(cfg.output_dir)
    runs = []
    last = None
    for r in range(repetitions + 1):
        d = dict(cfg.to_dict(), output_dir=str(base / f"rep{r}"), write_frames=False, evaluate=False)
        last = run_pipeline(PipelineConfig.from_dict(d))
        shutil.rmtree(base / f"rep{r}", ignore_errors=True)
        if r > 0:
            runs.append(dict(last.metrics.stage_seconds))
    report = BenchReport(runs, last.metrics.n_frames, last.metrics.keyframe_count)
    base.mkdir(parents=True, exist_ok=True)
    report.write_csv(base / "bench.csv")
    return report


# -- evaluation of frame directories ---------------------------------------------


def evaluate_frames(frames_dir, reference_dir, out_csv=None) -> MetricsRecord:
    """PSNR between matching PPM files of two directories; holes from alpha sidecars when present."""
    a_dir, b_dir = Path(frames_dir), Path(reference_dir)
    names = sorted(p.name for p in a_dir.glob("frame_*.ppm"))
    if not names:
        raise MissingManifest(f"no frames in {a_dir}")
    rec = MetricsRecord(psnr=[])
    for name in names:
        a = read_ppm(a_dir / name).astype(float) / 255.0
        ref = b_dir / name
        if not ref.is_file():
            raise MissingManifest(f"reference frame {ref} is missing")
        b = read_ppm(ref).astype(float) / 255.0
        rec.psnr.append(psnr(a, b))
        side = a_dir / name.replace(".ppm", ".alpha.f32")
        rec.holes.append(hole_fraction(read_sidecar(side, (a.shape[1], a.shape[0]))) if side.is_file() else 0.0)
    rec.n_frames = len(names)
    if out_csv is not None:
        rec.write_frame_csv(out_csv)
    return rec
