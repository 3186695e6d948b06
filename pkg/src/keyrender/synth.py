"""Procedural ground-truth scenes, camera trajectories and visibility oracles.

Everything here is a pure function of its parameters and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import UnknownKind, UnknownRecipe
from .gaussians import GaussianScene, PointCloud
from .geometry import CameraPose, Intrinsics, Quaternion, SimilarityTransform, Trajectory, compose, quat_from_rotation_matrix
from .render import DEFAULT_CONFIG, RenderConfig, render

RECIPES = ("room", "cloudfield", "checker-plane")
TRAJECTORY_KINDS = ("orbit", "dolly", "smooth-random-walk")
DEFAULT_BUDGETS = {"room": 50_000, "cloudfield": 20_000, "checker-plane": 20_000}


@dataclass(frozen=True)
class SceneRecipe:
    name: str = "room"
    budget: int | None = None

    @property
    def primitive_budget(self) -> int:
        return int(self.budget if self.budget is not None else DEFAULT_BUDGETS[self.name])


# -- scenes ----------------------------------------------------------------------


@dataclass
class _Rect:
    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    size: tuple[float, float]
    texture: tuple  # (kind, params...)

    @property
    def area(self) -> float:
        return self.size[0] * self.size[1]


def _rect_counts(rects: Sequence[_Rect], spacing: float) -> list[tuple[int, int]]:
    return [(max(1, int(r.size[0] / spacing)), max(1, int(r.size[1] / spacing))) for r in rects]


def _fit_spacing(rects: Sequence[_Rect], budget: int) -> float:
    """Smallest grid spacing whose total primitive count stays within ``budget``."""
    area = sum(r.area for r in rects)
    lo, hi = math.sqrt(area / budget) * 0.5, math.sqrt(area / budget) * 4.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        n = sum(a * b for a, b in _rect_counts(rects, mid))
        if n > budget:
            lo = mid
        else:
            hi = mid
    return hi


def _texture(kind, params, uv: np.ndarray) -> np.ndarray:
    u, v = uv[:, 0], uv[:, 1]
    if kind == "solid":
        return np.broadcast_to(params[0], (len(u), 3)).copy()
    if kind == "checker":
        c0, c1, tile = params
        mask = (np.floor(u / tile) + np.floor(v / tile)) % 2 == 0
        return np.where(mask[:, None], c0, c1)
    if kind == "waves":
        base, amp, wavelength, phase = params
        s = np.sin(2 * np.pi * u / wavelength + phase[0]) * np.cos(2 * np.pi * v / (0.7 * wavelength) + phase[1])
        return base + amp * s[:, None]
    raise ValueError(kind)


def _surface_gaussians(rects: Sequence[_Rect], budget: int, rng: np.random.Generator):
    spacing = _fit_spacing(rects, budget)
    means, scales, rots, colors = [], [], [], []
    for r, (n1, n2) in zip(rects, _rect_counts(rects, spacing)):
        h1, h2 = r.size[0] / n1, r.size[1] / n2
        a, b = np.meshgrid((np.arange(n1) + 0.5) * h1, (np.arange(n2) + 0.5) * h2, indexing="ij")
        a, b = a.ravel(), b.ravel()
        a = np.clip(a + rng.uniform(-0.15, 0.15, a.shape) * h1, 0.0, r.size[0])
        b = np.clip(b + rng.uniform(-0.15, 0.15, b.shape) * h2, 0.0, r.size[1])
        means.append(r.origin + a[:, None] * r.e1 + b[:, None] * r.e2)
        n = np.cross(r.e1, r.e2)
        q = quat_from_rotation_matrix(np.stack([r.e1, r.e2, n], axis=1)).as_array()
        rots.append(np.broadcast_to(q, (len(a), 4)))
        scales.append(np.broadcast_to([0.6 * h1, 0.6 * h2, 0.05 * min(h1, h2)], (len(a), 3)))
        col = _texture(r.texture[0], r.texture[1:], np.stack([a, b], 1))
        colors.append(np.clip(col + rng.uniform(-0.02, 0.02, col.shape), 0.0, 1.0))
    return np.concatenate(means), np.concatenate(scales), np.concatenate(rots), np.concatenate(colors)


def _box_faces(center, half, height, color, rng) -> list[_Rect]:
    cx, cy = center
    hx, hy = half
    x0, x1, y0, y1 = cx - hx, cx + hx, cy - hy, cy + hy
    ex, ey, ez = np.eye(3)
    shade = lambda f: ("solid", np.clip(np.asarray(color) * f, 0, 1))  # noqa: E731
    return [
        _Rect(np.array([x0, y0, height]), ex, ey, (2 * hx, 2 * hy), shade(1.1)),  # top, normal +z
        _Rect(np.array([x0, y0, 0.0]), ez, ex, (height, 2 * hx), shade(0.9)),  # -y face
        _Rect(np.array([x0, y1, 0.0]), ex, ez, (2 * hx, height), shade(0.85)),  # +y face
        _Rect(np.array([x0, y0, 0.0]), ey, ez, (2 * hy, height), shade(0.8)),  # -x face
        _Rect(np.array([x1, y0, 0.0]), ez, ey, (height, 2 * hy), shade(0.95)),  # +x face
    ]


def _room(rng: np.random.Generator, budget: int) -> GaussianScene:
    ax, ay, h = rng.uniform(3.5, 4.5), rng.uniform(3.5, 4.5), rng.uniform(2.8, 3.2)
    ex, ey, ez = np.eye(3)
    palette = lambda: rng.uniform(0.15, 0.85, 3)  # noqa: E731
    waves = lambda: ("waves", palette(), 0.12, rng.uniform(1.5, 3.0), rng.uniform(0, 2 * np.pi, 2))  # noqa: E731
    rects = [
        _Rect(np.array([-ax, -ay, 0.0]), ex, ey, (2 * ax, 2 * ay), ("checker", palette(), palette(), 1.0)),
        _Rect(np.array([-ax, -ay, h]), ey, ex, (2 * ay, 2 * ax), ("waves", np.full(3, 0.8), 0.05, 3.0, np.zeros(2))),
        _Rect(np.array([-ax, -ay, 0.0]), ex, ez, (2 * ax, h), waves()),
        _Rect(np.array([-ax, ay, 0.0]), ez, ex, (h, 2 * ax), waves()),
        _Rect(np.array([-ax, -ay, 0.0]), ez, ey, (h, 2 * ay), waves()),
        _Rect(np.array([ax, -ay, 0.0]), ey, ez, (2 * ay, h), waves()),
    ]
    for _ in range(int(rng.integers(3, 6))):
        r = rng.uniform(0.0, 0.9)
        phi = rng.uniform(0, 2 * np.pi)
        rects += _box_faces((r * math.cos(phi), r * math.sin(phi)), rng.uniform(0.2, 0.5, 2), rng.uniform(0.4, 1.4), palette(), rng)
    means, scales, rots, colors = _surface_gaussians(rects, budget, rng)
    bounds = np.array([[-ax, -ay, 0.0], [ax, ay, h]])
    return GaussianScene(means, scales, rots, np.full(len(means), 0.98), colors, (0.0, 0.0, 0.0), bounds)


def _checker_plane(rng: np.random.Generator, budget: int) -> GaussianScene:
    ex, ey, _ = np.eye(3)
    c0, c1 = rng.uniform(0.1, 0.4, 3), rng.uniform(0.6, 0.9, 3)
    rect = _Rect(np.array([-4.0, -4.0, 0.0]), ex, ey, (8.0, 8.0), ("checker", c0, c1, 0.5))
    means, scales, rots, colors = _surface_gaussians([rect], budget, rng)
    means[:, 2] = 0.0
    bounds = np.array([[-4.0, -4.0, 0.0], [4.0, 4.0, 3.0]])
    return GaussianScene(means, scales, rots, np.full(len(means), 0.98), colors, (0.0, 0.0, 0.0), bounds)


def _cloudfield(rng: np.random.Generator, budget: int) -> GaussianScene:
    n_clusters = int(rng.integers(6, 13))
    sizes = rng.multinomial(budget - n_clusters, np.full(n_clusters, 1.0 / n_clusters)) + 1
    means, colors = [], []
    for k in range(n_clusters):
        r, phi = rng.uniform(0, 1.5), rng.uniform(0, 2 * np.pi)
        c = np.array([r * math.cos(phi), r * math.sin(phi), rng.uniform(0.8, 3.2)])
        A = rng.normal(size=(3, 3)) * rng.uniform(0.1, 0.35)
        pts = c + rng.normal(size=(sizes[k], 3)) @ A.T
        means.append(pts)
        base = rng.uniform(0.1, 0.9, 3)
        colors.append(np.clip(base + rng.normal(scale=0.05, size=(sizes[k], 3)), 0, 1))
    means = np.concatenate(means)
    bounds = np.array([[-5.0, -5.0, 0.0], [5.0, 5.0, 4.0]])
    means = np.clip(means, bounds[0], bounds[1])
    n = len(means)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianScene(means, rng.uniform(0.02, 0.06, (n, 3)), q, rng.uniform(0.6, 1.0, n), np.concatenate(colors), (0.0, 0.0, 0.0), bounds)


def generate_scene(recipe: SceneRecipe | str = "room", seed: int = 0, budget: int | None = None) -> GaussianScene:
    """Deterministic ground-truth scene for ``recipe`` (``room``, ``cloudfield`` or ``checker-plane``)."""
    if isinstance(recipe, str):
        recipe = SceneRecipe(recipe, budget)
    elif budget is not None:
        recipe = SceneRecipe(recipe.name, budget)
    if recipe.name not in RECIPES:
        raise UnknownRecipe(f"unknown scene recipe {recipe.name!r}; expected one of {RECIPES}")
    rng = np.random.default_rng([seed, RECIPES.index(recipe.name)])
    build = {"room": _room, "cloudfield": _cloudfield, "checker-plane": _checker_plane}[recipe.name]
    return build(rng, recipe.primitive_budget)


def scene_descriptor(scene: GaussianScene, dim: int = 16) -> np.ndarray:
    """Procedural stand-in for a global image token.

    Bounding-box extents, log10 primitive count, mean nearest-neighbour distance,
    mean color and mean opacity, zero-padded to ``dim``.
    """
    from scipy.spatial import cKDTree

    if len(scene) == 0:
        return np.zeros(dim)
    lo, hi = (scene.bounds if scene.bounds is not None else np.stack([scene.means.min(0), scene.means.max(0)]))
    sample = scene.means[:: max(1, len(scene) // 4000)]
    nn = 0.0
    if len(sample) > 1:
        d, _ = cKDTree(sample).query(sample, k=2)
        nn = float(d[:, 1].mean())
    feats = np.concatenate([(hi - lo) / 10.0, [math.log10(len(scene)) / 5.0, 10.0 * nn], scene.colors.mean(0), [scene.opacities.mean()]])
    out = np.zeros(dim)
    out[: min(dim, len(feats))] = feats[:dim]
    return out


# -- trajectories ----------------------------------------------------------------


def _rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def generate_trajectory(
    kind: str,
    duration_s: float,
    fps: float,
    seed: int,
    scene_bounds,
    resolution: tuple[int, int] = (256, 256),
    fov_deg: float = 70.0,
    radius: float | None = None,
    sweep_deg: float | None = None,
) -> Trajectory:
    """Camera path inside ``scene_bounds`` (a ``(2, 3)`` box).

    ``orbit`` circles the box center at ``radius`` (default 30% of the smaller
    horizontal extent) looking at a point below camera height; ``sweep_deg``
    sets the total swept angle (default 360).  ``dolly`` moves straight toward
    the center, ``smooth-random-walk`` wanders on a band around it.
    """
    if kind not in TRAJECTORY_KINDS:
        raise UnknownKind(f"unknown trajectory kind {kind!r}; expected one of {TRAJECTORY_KINDS}")
    if not (duration_s > 0 and fps > 0):
        raise ValueError("duration and fps must be positive")
    lo, hi = np.asarray(scene_bounds, dtype=float)
    n = max(1, int(round(duration_s * fps)))
    K = Intrinsics.from_fov(resolution[0], resolution[1], fov_deg)
    rng = np.random.default_rng([seed, TRAJECTORY_KINDS.index(kind), 17])
    center = 0.5 * (lo + hi)
    ext = hi - lo
    cam_z = lo[2] + 0.5 * ext[2]
    target_z = lo[2] + 0.25 * ext[2]
    pivot = np.array([center[0], center[1], cam_z])
    r0 = radius if radius is not None else 0.3 * min(ext[0], ext[1])
    s = np.arange(n) / max(n - 1, 1)
    poses = []
    if kind == "orbit":
        sweep = math.radians(360.0 if sweep_deg is None else sweep_deg)
        start = rng.uniform(0, 2 * np.pi)
        direction = 1.0 if rng.random() < 0.5 else -1.0
        # a full turn spreads n frames over [0, 2pi) so the path does not revisit its start
        span = sweep * (n - 1) / n if abs(sweep - 2 * np.pi) < 1e-12 else sweep
        for k in range(n):
            th = start + direction * span * s[k]
            eye = pivot + r0 * np.array([math.cos(th), math.sin(th), 0.0])
            poses.append(CameraPose.look_at(eye, [center[0], center[1], target_z], K))
    elif kind == "dolly":
        heading = rng.uniform(0, 2 * np.pi)
        lateral = rng.uniform(-0.15, 0.15) * r0
        d = _rot_z(heading) @ np.array([1.0, 0.0, 0.0])
        side = _rot_z(heading) @ np.array([0.0, 1.0, 0.0])
        start = pivot - 1.35 * r0 * d + lateral * side
        travel = 0.55 * r0
        tilt = (cam_z - target_z) / (1.35 * r0)
        for k in range(n):
            eye = start + travel * s[k] * d
            poses.append(CameraPose.look_at(eye, eye + d - tilt * np.array([0.0, 0.0, 1.0]), K))
    else:
        t = np.arange(n) / fps
        theta = rng.uniform(0, 2 * np.pi) + sum(
            rng.uniform(0.3, 0.9) * np.sin(2 * np.pi * rng.uniform(0.02, 0.06) * t + rng.uniform(0, 2 * np.pi)) for _ in range(3)
        )
        rad = r0 * (1.0 + 0.12 * np.sin(2 * np.pi * rng.uniform(0.03, 0.08) * t + rng.uniform(0, 2 * np.pi)))
        z = cam_z + 0.1 * ext[2] * np.sin(2 * np.pi * rng.uniform(0.03, 0.08) * t + rng.uniform(0, 2 * np.pi))
        yaw = 0.35 * np.sin(2 * np.pi * rng.uniform(0.02, 0.05) * t + rng.uniform(0, 2 * np.pi))
        for k in range(n):
            eye = np.array([center[0] + rad[k] * math.cos(theta[k]), center[1] + rad[k] * math.sin(theta[k]), z[k]])
            look = np.array([center[0], center[1], target_z]) - eye
            look = _rot_z(yaw[k]) @ look
            poses.append(CameraPose.look_at(eye, eye + look, K))
    return Trajectory(tuple(poses), fps)


# -- visibility oracle and keyframe provider -------------------------------------


def unproject_pixels(frame, pose: CameraPose, ii: np.ndarray, jj: np.ndarray) -> np.ndarray:
    """World points at the expected depth behind pixel centers ``(ii, jj)``."""
    K = pose.intrinsics
    z = frame.depth[jj, ii]
    x = (ii + 0.5 - K.cx) / K.fx * z
    y = (jj + 0.5 - K.cy) / K.fy * z
    return np.stack([x, y, z], axis=1) @ pose.rotation_matrix().T + pose.center


def visible_points(
    scene: GaussianScene,
    pose: CameraPose,
    resolution,
    stride: int = 4,
    frame_index: int = -1,
    alpha_threshold: float = 0.5,
    config: RenderConfig = DEFAULT_CONFIG,
    frame=None,
) -> PointCloud:
    """One world point per ``stride x stride`` block at the rendered expected depth.

    Only pixels with accumulated alpha of at least ``alpha_threshold`` yield a point.
    Pass ``frame`` to reuse an existing render of ``scene`` from ``pose``.
    """
    W, H = resolution
    if frame is None:
        frame = render(scene, pose, resolution, config)
    off = stride // 2
    jj, ii = np.meshgrid(np.arange(off, H, stride), np.arange(off, W, stride), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    keep = frame.alpha[jj, ii] >= alpha_threshold
    ii, jj = ii[keep], jj[keep]
    pts = unproject_pixels(frame, pose, ii, jj)
    return PointCloud(pts, np.full(len(pts), frame_index, dtype=np.int64), frame.color[jj, ii])


@dataclass(frozen=True)
class Corruption:
    """``none``, ``noise`` (pixel sigma ``amount``) or ``drift`` (``amount`` radians per keyframe)."""

    kind: str = "none"
    amount: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "noise", "drift"):
            raise ValueError(f"unknown corruption {self.kind!r}")

    @classmethod
    def parse(cls, text: str | None) -> "Corruption":
        if not text or text == "none":
            return cls()
        kind, _, value = text.partition(":")
        return cls(kind, float(value or 0.0))

    def __str__(self) -> str:
        return "none" if self.kind == "none" else f"{self.kind}:{self.amount!r}"


@dataclass(frozen=True)
class Keyframe:
    image: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    pose: CameraPose  # the pose the image actually depicts


def drift_transform(k: int, rate: float, pivot) -> SimilarityTransform:
    """Rigid rotation by ``k * rate`` about the vertical axis through ``pivot``."""
    R = Quaternion.from_axis_angle([0.0, 0.0, 1.0], k * rate)
    pivot = np.asarray(pivot, dtype=float)
    return SimilarityTransform(1.0, R, pivot - R.rotate(pivot))


def oracle_keyframes(
    scene: GaussianScene,
    poses: Sequence[CameraPose],
    resolution,
    corruption: Corruption | str | None = None,
    seed: int = 0,
    pivot=None,
    config: RenderConfig = DEFAULT_CONFIG,
) -> list[Keyframe]:
    """Ground-truth renders standing in for generated keyframes.

    ``noise`` adds i.i.d. gaussian pixel noise (clipped to [0, 1]); ``drift``
    renders keyframe ``k`` from its pose rotated by ``k * rate`` about the
    vertical axis through ``pivot`` (scene center by default).
    """
    if not len(poses):
        raise ValueError("need at least one keyframe pose")
    if not isinstance(corruption, Corruption):
        corruption = Corruption.parse(corruption)
    if pivot is None:
        pivot = scene.bounds.mean(0) if scene.bounds is not None else np.zeros(3)
    rng = np.random.default_rng(seed)
    out = []
    for k, pose in enumerate(poses):
        if corruption.kind == "drift":
            pose = compose(drift_transform(k, corruption.amount, pivot), pose)
        frame = render(scene, pose, resolution, config)
        image = frame.color
        if corruption.kind == "noise" and corruption.amount > 0:
            image = np.clip(image + rng.normal(scale=corruption.amount, size=image.shape), 0.0, 1.0)
        out.append(Keyframe(image, frame.depth, frame.alpha, pose))
    return out
