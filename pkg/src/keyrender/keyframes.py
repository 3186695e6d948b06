"""Coverage-driven keyframe selection, uniform keyframe sampling and generation-batch planning."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidCount
from .gaussians import PointCloud
from .geometry import NEAR_PLANE, CameraPose, project_points

DEFAULT_TAU = 0.9
DEFAULT_SPLAT_RADIUS = 2
DEFAULT_WINDOW = 8


def coverage_mask(cloud: PointCloud | np.ndarray, pose: CameraPose, resolution, splat_radius_px: int = DEFAULT_SPLAT_RADIUS,
                  depth_map: np.ndarray | None = None, depth_tolerance: float = 0.05) -> np.ndarray:
    """Boolean ``(H, W)`` mask of pixels marked by the projected cloud.

    Each in-frustum point marks the ``(2r+1)^2`` square around its pixel.  With
    ``depth_map`` a point only counts when it is not behind the surface recorded
    there by more than ``depth_tolerance`` (relative).
    """
    if splat_radius_px < 0:
        raise ValueError("splat radius must be >= 0")
    W, H = resolution
    mask = np.zeros((H, W), dtype=bool)
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return mask
    uv, z = project_points(pts, pose)
    ok = z > NEAR_PLANE
    ok &= (uv[:, 0] >= 0) & (uv[:, 0] < W) & (uv[:, 1] >= 0) & (uv[:, 1] < H)
    u = np.floor(uv[ok, 0]).astype(np.int64)
    v = np.floor(uv[ok, 1]).astype(np.int64)
    if depth_map is not None:
        d = depth_map[v, u]
        front = (d <= 0) | (z[ok] <= d * (1.0 + depth_tolerance))
        u, v = u[front], v[front]
    r = int(splat_radius_px)
    for dy in range(-r, r + 1):
        vv = v + dy
        okv = (vv >= 0) & (vv < H)
        for dx in range(-r, r + 1):
            uu = u + dx
            m = okv & (uu >= 0) & (uu < W)
            mask[vv[m], uu[m]] = True
    return mask


def coverage_ratio(cloud: PointCloud | np.ndarray, pose: CameraPose, resolution, splat_radius_px: int = DEFAULT_SPLAT_RADIUS,
                   depth_map: np.ndarray | None = None) -> float:
    """Fraction of image pixels marked by projecting ``cloud`` into ``pose``."""
    W, H = resolution
    return float(coverage_mask(cloud, pose, resolution, splat_radius_px, depth_map).sum()) / float(W * H)


@dataclass
class CoverageReport:
    tau: float
    ratios: list[float]
    selected: list[bool]

    @property
    def indices(self) -> list[int]:
        return [i for i, s in enumerate(self.selected) if s]

    @property
    def count(self) -> int:
        return int(sum(self.selected))

    def to_dict(self) -> dict:
        return {"tau": self.tau, "ratios": list(self.ratios), "selected": self.indices, "count": self.count}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def select_keyframes(
    frames: Sequence[PointCloud],
    poses: Sequence[CameraPose],
    tau: float = DEFAULT_TAU,
    resolution=(256, 256),
    splat_radius_px: int = DEFAULT_SPLAT_RADIUS,
    depth_maps: Sequence[np.ndarray] | None = None,
) -> CoverageReport:
    """Greedy coverage-based selection.

    The first frame is always selected and seeds the accumulated cloud.  Every
    later frame is scored against the cloud accumulated so far; when its ratio
    falls below ``tau`` it is selected and its own cloud is merged in.
    """
    if len(frames) < 1 or len(frames) != len(poses):
        raise ValueError("need one point cloud per pose and at least one frame")
    ratios = [1.0]
    selected = [True]
    acc = [frames[0].points]
    for i in range(1, len(frames)):
        pts = np.concatenate(acc) if len(acc) > 1 else acc[0]
        if len(acc) > 1:
            acc = [pts]
        r = coverage_ratio(pts, poses[i], resolution, splat_radius_px, None if depth_maps is None else depth_maps[i])
        ratios.append(r)
        if r < tau:
            selected.append(True)
            acc.append(frames[i].points)
        else:
            selected.append(False)
    return CoverageReport(float(tau), ratios, selected)


def uniform_keyframe_indices(n_frames: int, count: int) -> list[int]:
    """``round(j * (n - 1) / (K - 1))`` for ``j = 0..K-1`` (half rounds up)."""
    if n_frames == 1 and count == 1:
        return [0]
    if not (2 <= count <= n_frames):
        raise InvalidCount(f"need 2 <= K <= n_frames, got K={count}, n_frames={n_frames}")
    j = np.arange(count)
    return [int(x) for x in np.floor(j * (n_frames - 1) / (count - 1) + 0.5)]


@dataclass(frozen=True)
class GenerationBatch:
    targets: tuple[int, ...]
    conditioning: tuple[int, ...]  # empty means: conditioned on the input image only


@dataclass
class KeyframePlan:
    count: int
    indices: list[int]
    batches: list[GenerationBatch] = field(default_factory=list)
    tau: float | None = None
    ratios: list[float] | None = None
    selected: list[int] | None = None

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "ratios": self.ratios,
            "selected": self.selected,
            "count": self.count,
            "indices": list(self.indices),
            "batches": [{"targets": list(b.targets), "conditioning": list(b.conditioning)} for b in self.batches],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "KeyframePlan":
        batches = [GenerationBatch(tuple(b["targets"]), tuple(b["conditioning"])) for b in d.get("batches", [])]
        return cls(d["count"], list(d["indices"]), batches, d.get("tau"), d.get("ratios"), d.get("selected"))


def plan_generation_batches(count: int, window: int = DEFAULT_WINDOW) -> list[GenerationBatch]:
    """Two-stage schedule over keyframe positions ``0..count-1``.

    Stage one generates ``window`` keyframes spread uniformly over the whole
    range from the input image alone.  Stage two walks the remaining positions
    in order; each batch is conditioned on the nearest generated keyframe on
    either side (one at a boundary, and only the left one when ``window == 2``)
    and holds at most ``window - #conditioning`` targets, all inside a single
    gap between generated keyframes.
    """
    if count < 1:
        raise InvalidCount("need at least one keyframe")
    if window < 2:
        raise ValueError("context window must be >= 2")
    if count <= window:
        return [GenerationBatch(tuple(range(count)), ())]
    first = uniform_keyframe_indices(count, window)
    batches = [GenerationBatch(tuple(first), ())]
    done = np.zeros(count, dtype=bool)
    done[first] = True
    pending = [i for i in range(count) if not done[i]]
    while pending:
        start = pending[0]
        left = [j for j in range(start - 1, -1, -1) if done[j]][:1]
        right = [j for j in range(start + 1, count) if done[j]][:1]
        cond = tuple(left + right)
        if len(cond) >= window:
            cond = cond[: window - 1]  # a window of 2 leaves room for one conditioner only
        cap = window - len(cond)
        targets = []
        for i in pending:
            if len(targets) == cap or (right and i > right[0]):
                break
            targets.append(i)
        batches.append(GenerationBatch(tuple(targets), cond))
        done[targets] = True
        pending = pending[len(targets):]
    return batches


def plan_keyframes(n_frames: int, count: int, window: int = DEFAULT_WINDOW) -> KeyframePlan:
    """Uniform keyframe indices over a dense trajectory plus their generation batches."""
    indices = uniform_keyframe_indices(n_frames, count)
    return KeyframePlan(len(indices), indices, plan_generation_batches(len(indices), window))
