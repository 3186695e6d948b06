"""Gaussian splat primitives, point clouds, and their on-disk formats."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Quaternion, SimilarityTransform, canonicalize_quaternions, quat_multiply, quats_to_matrices

SPLAT_MAGIC = b"SPLATv1"
_RECORD = np.dtype(
    [("mean", "<f4", 3), ("scale", "<f4", 3), ("quat", "<f4", 4), ("opacity", "<f4"), ("rgb", "<f4", 3)]
)


@dataclass(frozen=True)
class Gaussian3D:
    mean: tuple[float, float, float]
    scale: tuple[float, float, float]
    orientation: Quaternion
    opacity: float
    color: tuple[float, float, float]

    def __post_init__(self):
        if min(self.scale) <= 0:
            raise ValueError("gaussian scales must be strictly positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must lie in [0, 1]")

    def covariance(self) -> np.ndarray:
        R = self.orientation.to_matrix()
        return R @ np.diag(np.square(self.scale)) @ R.T


def _frozen(a, dtype=np.float64, shape=None) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    if shape is not None:
        a = a.reshape(shape)
    a.setflags(write=False)
    return a


class GaussianScene:
    """Array-backed container of anisotropic gaussians.

    Attributes are read-only arrays: ``means (N,3)``, ``scales (N,3)`` (per-axis
    standard deviations), ``rotations (N,4)`` unit quaternions, ``opacities (N,)``
    and ``colors (N,3)``.  ``bounds`` is the optional recipe bounding box.
    Zero-opacity primitives are accepted and never contribute to a render.
    """

    def __init__(self, means, scales, rotations, opacities, colors, background=(0.0, 0.0, 0.0), bounds=None):
        means = np.asarray(means, dtype=float).reshape(-1, 3)
        n = len(means)
        scales = np.asarray(scales, dtype=float).reshape(n, 3)
        rotations = np.asarray(rotations, dtype=float).reshape(n, 4)
        opacities = np.asarray(opacities, dtype=float).reshape(n)
        colors = np.asarray(colors, dtype=float).reshape(n, 3)
        if n:
            if not np.all(np.isfinite(means)):
                raise ValueError("gaussian means must be finite")
            if np.any(scales <= 0) or not np.all(np.isfinite(scales)):
                raise ValueError("gaussian scales must be finite and strictly positive")
            if np.any((opacities < 0) | (opacities > 1)):
                raise ValueError("opacities must lie in [0, 1]")
            norms = np.linalg.norm(rotations, axis=1, keepdims=True)
            if np.any(norms == 0):
                raise ValueError("zero-norm rotation quaternion")
            # leave near-unit quaternions bit-exact so float32 round-trips stay idempotent
            if np.any(np.abs(norms - 1.0) > 1e-6):
                rotations = rotations / norms
        self.means = _frozen(means)
        self.scales = _frozen(scales)
        self.rotations = _frozen(rotations)
        self.opacities = _frozen(opacities)
        self.colors = _frozen(np.clip(colors, 0.0, 1.0))
        self.background = _frozen(background, shape=3)
        self.bounds = None if bounds is None else _frozen(bounds, shape=(2, 3))

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            tuple(self.means[i]),
            tuple(self.scales[i]),
            Quaternion.from_array(self.rotations[i]),
            float(self.opacities[i]),
            tuple(self.colors[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __repr__(self) -> str:
        return f"GaussianScene(n={len(self)}, background={tuple(self.background)})"

    @classmethod
    def empty(cls, background=(0.0, 0.0, 0.0)) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)), background)

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian3D], background=(0.0, 0.0, 0.0)) -> "GaussianScene":
        gs = list(gaussians)
        if not gs:
            return cls.empty(background)
        return cls(
            [g.mean for g in gs],
            [g.scale for g in gs],
            [g.orientation.as_array() for g in gs],
            [g.opacity for g in gs],
            [g.color for g in gs],
            background,
        )

    def replace(self, **kw) -> "GaussianScene":
        args = dict(
            means=self.means,
            scales=self.scales,
            rotations=self.rotations,
            opacities=self.opacities,
            colors=self.colors,
            background=self.background,
            bounds=self.bounds,
        )
        args.update(kw)
        return GaussianScene(**args)

    def covariances(self) -> np.ndarray:
        R = quats_to_matrices(self.rotations)
        return np.einsum("nij,nj,nkj->nik", R, self.scales**2, R)

    def subset(self, index) -> "GaussianScene":
        return self.replace(
            means=self.means[index],
            scales=self.scales[index],
            rotations=self.rotations[index],
            opacities=self.opacities[index],
            colors=self.colors[index],
        )

    def transformed(self, S: SimilarityTransform) -> "GaussianScene":
        """The same scene expressed in the frame reached through ``S``."""
        q = np.broadcast_to(S.rotation.as_array(), self.rotations.shape)
        bounds = None
        if self.bounds is not None:
            corners = np.array([[x, y, z] for x in self.bounds[:, 0] for y in self.bounds[:, 1] for z in self.bounds[:, 2]])
            moved = S.apply(corners)
            bounds = np.stack([moved.min(0), moved.max(0)])
        return self.replace(
            means=S.apply(self.means) if len(self) else self.means,
            scales=self.scales * S.scale,
            rotations=canonicalize_quaternions(quat_multiply(q, self.rotations)) if len(self) else self.rotations,
            bounds=bounds,
        )

    def as_float32(self) -> "GaussianScene":
        """Round every attribute through float32, i.e. what a SPLATv1 round-trip yields."""
        f = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)  # noqa: E731
        return self.replace(
            means=f(self.means), scales=f(self.scales), rotations=f(self.rotations), opacities=f(self.opacities), colors=f(self.colors)
        )

    @staticmethod
    def concatenate(scenes: Sequence["GaussianScene"]) -> "GaussianScene":
        first = scenes[0]
        return first.replace(
            means=np.concatenate([s.means for s in scenes]),
            scales=np.concatenate([s.scales for s in scenes]),
            rotations=np.concatenate([s.rotations for s in scenes]),
            opacities=np.concatenate([s.opacities for s in scenes]),
            colors=np.concatenate([s.colors for s in scenes]),
        )


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    frame_index: np.ndarray | None = None
    colors: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.frame_index is not None:
            object.__setattr__(self, "frame_index", np.asarray(self.frame_index, dtype=np.int64).reshape(len(pts)))
        if self.colors is not None:
            object.__setattr__(self, "colors", np.asarray(self.colors, dtype=float).reshape(len(pts), 3))

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    @staticmethod
    def merge(clouds: Sequence["PointCloud"]) -> "PointCloud":
        clouds = [c for c in clouds if c is not None]
        if not clouds:
            return PointCloud.empty()
        pts = np.concatenate([c.points for c in clouds])
        if all(c.frame_index is not None for c in clouds):
            idx = np.concatenate([c.frame_index for c in clouds])
        else:
            idx = None
        return PointCloud(pts, idx)


# -- files -----------------------------------------------------------------------


def write_splat(path, scene: GaussianScene) -> None:
    """Binary little-endian: ``SPLATv1``, uint32 count, then 14 float32 per gaussian."""
    rec = np.zeros(len(scene), dtype=_RECORD)
    rec["mean"] = scene.means
    rec["scale"] = scene.scales
    rec["quat"] = scene.rotations
    rec["opacity"] = scene.opacities
    rec["rgb"] = scene.colors
    with open(path, "wb") as fh:
        fh.write(SPLAT_MAGIC)
        fh.write(struct.pack("<I", len(scene)))
        fh.write(rec.tobytes())


def read_splat(path, background=(0.0, 0.0, 0.0)) -> GaussianScene:
    data = Path(path).read_bytes()
    if data[: len(SPLAT_MAGIC)] != SPLAT_MAGIC:
        raise ValueError(f"{path}: not a SPLATv1 file")
    off = len(SPLAT_MAGIC)
    (n,) = struct.unpack_from("<I", data, off)
    rec = np.frombuffer(data, dtype=_RECORD, count=n, offset=off + 4)
    return GaussianScene(
        rec["mean"].astype(np.float64),
        rec["scale"].astype(np.float64),
        rec["quat"].astype(np.float64),
        rec["opacity"].astype(np.float64),
        rec["rgb"].astype(np.float64),
        background,
    )


def write_point_cloud(path, cloud: PointCloud) -> None:
    """ASCII ``x y z frame_idx`` lines; frame index is -1 when unknown."""
    idx = cloud.frame_index if cloud.frame_index is not None else np.full(len(cloud), -1)
    with open(path, "w") as fh:
        for p, i in zip(cloud.points, idx):
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {int(i)}\n")


def read_point_cloud(path) -> PointCloud:
    rows = np.loadtxt(path, ndmin=2) if Path(path).stat().st_size else np.zeros((0, 4))
    return PointCloud(rows[:, :3], rows[:, 3].astype(np.int64))
