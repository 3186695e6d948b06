"""Supervision labels: coverage-selected keyframe counts on synthetic scenes."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from ..gaussians import GaussianScene
from ..geometry import Intrinsics, Trajectory, subsample_trajectory, with_intrinsics
from ..keyframes import DEFAULT_SPLAT_RADIUS, DEFAULT_TAU, CoverageReport, select_keyframes
from ..synth import generate_scene, generate_trajectory, scene_descriptor, visible_points

LABEL_FPS = 5.0
LABEL_RESOLUTION = 128
LABEL_STRIDE = 4


@dataclass(frozen=True)
class DensitySample:
    trajectory: Trajectory
    descriptor: np.ndarray
    n_gt: int

    def __post_init__(self):
        if self.n_gt < 1:
            raise ValueError("label must be at least one keyframe")
        if len(self.trajectory) < 1:
            raise ValueError("empty trajectory")


def rescale_trajectory(traj: Trajectory, width: int) -> tuple[Trajectory, tuple[int, int]]:
    """Same cameras with intrinsics scaled so the image is ``width`` pixels wide."""
    K = traj[0].intrinsics
    w0, h0 = 2.0 * K.cx, 2.0 * K.cy
    f = width / w0
    height = max(1, int(round(h0 * f)))
    return with_intrinsics(traj, Intrinsics(K.fx * f, K.fy * f, K.cx * f, K.cy * f)), (int(width), height)


def label_keyframes(
    scene: GaussianScene,
    traj: Trajectory,
    tau: float = DEFAULT_TAU,
    stride: int = LABEL_STRIDE,
    splat_radius_px: int = DEFAULT_SPLAT_RADIUS,
    resolution: int = LABEL_RESOLUTION,
    label_fps: float = LABEL_FPS,
) -> CoverageReport:
    """Coverage selection on the trajectory subsampled to ``label_fps`` at a reduced image width."""
    sub = subsample_trajectory(traj, label_fps)
    sub, res = rescale_trajectory(sub, resolution)
    clouds = [visible_points(scene, p, res, stride, i) for i, p in enumerate(sub)]
    return select_keyframes(clouds, list(sub), tau, res, splat_radius_px)


@dataclass(frozen=True)
class LabelJob:
    recipe: str = "room"
    scene_seed: int = 0
    kind: str = "orbit"
    traj_seed: int = 0
    duration_s: float = 20.0
    fps: float = 30.0
    sweep_deg: float | None = None
    budget: int | None = None


def default_label_jobs(count: int, seed: int = 0, recipes: Sequence[str] = ("room",),
                       kinds: Sequence[str] = ("orbit", "dolly"), budget: int | None = None) -> list[LabelJob]:
    """Seeded mix of scenes and trajectories; orbits get a random sweep in [60, 360] degrees."""
    rng = np.random.default_rng([seed, 4242])
    jobs = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        sweep = float(rng.uniform(60.0, 360.0)) if kind == "orbit" else None
        jobs.append(LabelJob(recipes[i % len(recipes)], int(rng.integers(1 << 30)), kind, int(rng.integers(1 << 30)),
                             sweep_deg=sweep, budget=budget))
    return jobs


def build_label_dataset(
    jobs: Iterable[LabelJob],
    tau: float = DEFAULT_TAU,
    stride: int = LABEL_STRIDE,
    splat_radius_px: int = DEFAULT_SPLAT_RADIUS,
    resolution: int = LABEL_RESOLUTION,
    descriptor_dim: int = 16,
) -> list[DensitySample]:
    """One labelled sample per job; scenes are cached across jobs sharing recipe, seed and budget."""
    scenes: dict[tuple, GaussianScene] = {}
    out = []
    for job in jobs:
        key = (job.recipe, job.scene_seed, job.budget)
        if key not in scenes:
            scenes[key] = generate_scene(job.recipe, job.scene_seed, job.budget)
        scene = scenes[key]
        traj = generate_trajectory(job.kind, job.duration_s, job.fps, job.traj_seed, scene.bounds, sweep_deg=job.sweep_deg)
        rep = label_keyframes(scene, traj, tau, stride, splat_radius_px, resolution)
        out.append(DensitySample(traj, scene_descriptor(scene, descriptor_dim), rep.count))
    return out


def with_label(sample: DensitySample, n_gt: int) -> DensitySample:
    return replace(sample, n_gt=int(n_gt))
