"""Rigid-body math: quaternions, camera poses, trajectories and similarity transforms.

Conventions
-----------
* Quaternions are stored scalar-first ``(w, x, y, z)``.
* A :class:`CameraPose` is world-from-camera: ``rotation`` maps camera-frame
  directions into the world and ``translation`` is the camera center in world
  coordinates.
* Camera frame is right-handed, +x right, +y down, +z forward.  A pixel ``(i, j)``
  covers ``[i, i+1) x [j, j+1)`` so its center sits at ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyTrajectory, InvalidFactor, NonOrthonormalInput

NEAR_PLANE = 1e-4
_EPS = float(np.finfo(float).eps)


@dataclass(frozen=True)
class Quaternion:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        n = math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must have finite, non-zero norm")
        # already-unit input is kept as is, so normalizing is idempotent and files round-trip exactly
        if abs(n - 1.0) <= 4 * _EPS:
            n = 1.0
        for name in ("w", "x", "y", "z"):
            object.__setattr__(self, name, float(getattr(self, name)) / n)

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q) -> "Quaternion":
        q = np.asarray(q, dtype=float)
        return cls(q[0], q[1], q[2], q[3])

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        s = math.sin(0.5 * angle)
        return cls(math.cos(0.5 * angle), axis[0] * s, axis[1] * s, axis[2] * s)

    @classmethod
    def from_matrix(cls, R) -> "Quaternion":
        return quat_from_rotation_matrix(R)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def canonical(self) -> "Quaternion":
        """Representative of the rotation with ``w >= 0`` (first non-zero component positive on ties)."""
        return Quaternion.from_array(canonicalize_quaternions(self.as_array()))

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        return Quaternion.from_array(quat_multiply(self.as_array(), other.as_array()))

    def to_matrix(self) -> np.ndarray:
        return quats_to_matrices(self.as_array())

    def rotate(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.to_matrix().T

    def angle_to(self, other: "Quaternion") -> float:
        return rotation_angle(self, other)

    def is_same_rotation(self, other: "Quaternion", tol: float = 1e-9) -> bool:
        a = canonicalize_quaternions(self.as_array())
        b = canonicalize_quaternions(other.as_array())
        return bool(np.max(np.abs(a - b)) <= tol)


def canonicalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Flip signs so ``w >= 0``; when ``w == 0`` the first non-zero component is made positive.

    Works on a single ``(4,)`` quaternion or a stack ``(..., 4)``.
    """
    q = np.array(q, dtype=float, copy=True)
    flat = q.reshape(-1, 4)
    for k in range(4):
        # rows whose leading components are all zero up to k are decided by component k
        undecided = np.all(flat[:, :k] == 0.0, axis=1) if k else np.ones(len(flat), dtype=bool)
        flip = undecided & (flat[:, k] < 0.0)
        flat[flip] *= -1.0
    return flat.reshape(q.shape)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quats_to_matrices(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions of shape ``(..., 4)``."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_from_rotation_matrix(R, tol: float = 1e-6) -> Quaternion:
    """Convert a proper rotation matrix to a sign-canonical unit quaternion.

    Raises :class:`NonOrthonormalInput` when ``R`` is not orthonormal with
    ``det(R) = +1`` to within ``tol``.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise NonOrthonormalInput(float("inf"))
    deviation = max(np.max(np.abs(R.T @ R - np.eye(3))), abs(np.linalg.det(R) - 1.0))
    if not deviation <= tol:
        raise NonOrthonormalInput(float(deviation))

    # Shepperd's method: branch on the largest of the trace and diagonal
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    i = int(np.argmax([tr, R[0, 0], R[1, 1], R[2, 2]]))
    if i == 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return Quaternion.from_array(canonicalize_quaternions(np.array(q)))


def rotation_angle(q0: Quaternion, q1: Quaternion) -> float:
    """Angle in radians of the relative rotation between ``q0`` and ``q1``."""
    a, b = q0.as_array(), q1.as_array()
    if np.dot(a, b) < 0:
        b = -b
    return 4.0 * math.atan2(np.linalg.norm(a - b), np.linalg.norm(a + b))


def slerp(q0: Quaternion, q1: Quaternion, t: float) -> Quaternion:
    """Shortest-path spherical linear interpolation, returned sign-canonical."""
    a, b = q0.as_array(), q1.as_array()
    a /= np.linalg.norm(a)
    b /= np.linalg.norm(b)
    if np.dot(a, b) < 0.0:
        b = -b
    half = 2.0 * math.atan2(np.linalg.norm(a - b), np.linalg.norm(a + b))
    if half < 1e-7:
        out = (1.0 - t) * a + t * b
    else:
        s = math.sin(half)
        out = (math.sin((1.0 - t) * half) / s) * a + (math.sin(t * half) / s) * b
    out /= np.linalg.norm(out)
    return Quaternion.from_array(canonicalize_quaternions(out))


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float = 60.0) -> "Intrinsics":
        """Square pixels, principal point at the image center, horizontal field of view ``fov_deg``."""
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, width / 2.0, height / 2.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])


@dataclass(frozen=True)
class CameraPose:
    rotation: Quaternion
    translation: tuple[float, float, float]
    intrinsics: Intrinsics

    def __post_init__(self):
        t = tuple(float(v) for v in np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "translation", t)

    @classmethod
    def look_at(cls, eye, target, intrinsics: Intrinsics, up=(0.0, 0.0, 1.0)) -> "CameraPose":
        """Camera at ``eye`` with +z pointing at ``target`` and image-down roughly opposite ``up``."""
        eye = np.asarray(eye, dtype=float)
        forward = np.asarray(target, dtype=float) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=float))
        if np.linalg.norm(right) < 1e-12:
            right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward], axis=1)
        return cls(quat_from_rotation_matrix(R), eye, intrinsics)

    @property
    def center(self) -> np.ndarray:
        return np.array(self.translation)

    def rotation_matrix(self) -> np.ndarray:
        return self.rotation.to_matrix()

    def world_to_camera(self, points) -> np.ndarray:
        """Camera-frame coordinates of world points ``(..., 3)``."""
        return (np.asarray(points, dtype=float) - self.center) @ self.rotation_matrix()


@dataclass(frozen=True)
class Trajectory:
    poses: tuple[CameraPose, ...]
    fps: float

    def __post_init__(self):
        poses = tuple(self.poses)
        if not poses:
            raise EmptyTrajectory("trajectory needs at least one pose")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "fps", float(self.fps))

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def __iter__(self):
        return iter(self.poses)

    @property
    def duration(self) -> float:
        return len(self.poses) / self.fps

    def timestamps(self) -> np.ndarray:
        return np.arange(len(self.poses)) / self.fps

    def centers(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])

    def quaternions(self) -> np.ndarray:
        return np.array([p.rotation.as_array() for p in self.poses])

    def reversed(self) -> "Trajectory":
        return Trajectory(self.poses[::-1], self.fps)


def interpolate_trajectory(traj: Trajectory, factor: int) -> Trajectory:
    """Upsample by an integer ``factor``: slerp for rotations, linear for translations.

    Original poses are kept at indices ``i * factor``; intermediate poses copy the
    intrinsics of the earlier endpoint.
    """
    if traj is None or len(traj) == 0:
        raise EmptyTrajectory("cannot interpolate an empty trajectory")
    if int(factor) != factor or factor < 1:
        raise InvalidFactor(f"factor must be an integer >= 1, got {factor!r}")
    factor = int(factor)
    if factor == 1:
        return traj
    if len(traj) < 2:
        raise EmptyTrajectory("need at least two poses to interpolate")
    out = []
    for a, b in zip(traj.poses[:-1], traj.poses[1:]):
        out.append(a)
        ca, cb = a.center, b.center
        for k in range(1, factor):
            t = k / factor
            out.append(CameraPose(slerp(a.rotation, b.rotation, t), (1 - t) * ca + t * cb, a.intrinsics))
    out.append(traj.poses[-1])
    return Trajectory(tuple(out), traj.fps * factor)


def subsample_trajectory(traj: Trajectory, fps: float) -> Trajectory:
    """Keep every ``round(traj.fps / fps)``-th pose (no-op when ``fps >= traj.fps``)."""
    step = max(1, int(round(traj.fps / fps)))
    if step == 1:
        return traj
    return Trajectory(traj.poses[::step], traj.fps / step)


def project_point(p, pose: CameraPose, resolution: tuple[int, int]):
    """Pinhole projection of a world point.

    Returns ``(u, v, depth)`` or ``None`` when the point is within the near plane
    or lands outside ``[0, W) x [0, H)``.
    """
    W, H = resolution
    x, y, z = pose.world_to_camera(p)
    if z <= NEAR_PLANE:
        return None
    K = pose.intrinsics
    u = K.fx * x / z + K.cx
    v = K.fy * y / z + K.cy
    if not (0.0 <= u < W and 0.0 <= v < H):
        return None
    return float(u), float(v), float(z)


def project_points(points: np.ndarray, pose: CameraPose):
    """Vectorised projection: returns ``(uv (N,2), depth (N,))`` without any culling."""
    pc = pose.world_to_camera(points)
    z = pc[:, 2]
    K = pose.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([K.fx * pc[:, 0] / z + K.cx, K.fy * pc[:, 1] / z + K.cy], axis=1)
    return uv, z


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * R x + translation``."""

    scale: float = 1.0
    rotation: Quaternion = field(default_factory=Quaternion.identity)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("similarity scale must be positive")
        object.__setattr__(self, "scale", float(self.scale))
        t = tuple(float(v) for v in np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    @classmethod
    def from_matrix(cls, scale: float, R, t) -> "SimilarityTransform":
        return cls(scale, quat_from_rotation_matrix(R), t)

    def rotation_matrix(self) -> np.ndarray:
        return self.rotation.to_matrix()

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.scale * points @ self.rotation_matrix().T + np.array(self.translation)

    def __matmul__(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Composition: ``(self @ other).apply(x) == self.apply(other.apply(x))``."""
        R = self.rotation_matrix()
        t = self.scale * R @ np.array(other.translation) + np.array(self.translation)
        return SimilarityTransform(self.scale * other.scale, self.rotation * other.rotation, t)

    def inverse(self) -> "SimilarityTransform":
        Rt = self.rotation_matrix().T
        return SimilarityTransform(1.0 / self.scale, self.rotation.conjugate(), -(Rt @ np.array(self.translation)) / self.scale)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation_matrix()
        M[:3, 3] = self.translation
        return M

    def to_dict(self) -> dict:
        return {"scale": self.scale, "quat": list(self.rotation.as_array()), "t": list(self.translation)}

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityTransform":
        return cls(d["scale"], Quaternion.from_array(d["quat"]), d["t"])


def compose(S: SimilarityTransform, pose: CameraPose) -> CameraPose:
    """Move a camera by ``S``: center ``c -> sRc + t``, orientation left-multiplied by ``R``."""
    return CameraPose(S.rotation * pose.rotation, S.apply(pose.center), pose.intrinsics)


def apply_transform_to_trajectory(S: SimilarityTransform, traj: Trajectory) -> Trajectory:
    centers = S.apply(traj.centers())
    poses = tuple(CameraPose(S.rotation * p.rotation, c, p.intrinsics) for p, c in zip(traj.poses, centers))
    return Trajectory(poses, traj.fps)


# -- pose text files -------------------------------------------------------------

POSE_HEADER = "# frame_index qw qx qy qz tx ty tz fx fy cx cy"


def write_pose_file(path, traj: Trajectory) -> None:
    """Write ``frame_index qw qx qy qz tx ty tz fx fy cx cy`` lines (exact float round-trip)."""
    lines = [f"# fps {traj.fps!r}", POSE_HEADER]
    for i, p in enumerate(traj.poses):
        vals = list(p.rotation.as_array()) + list(p.translation) + list(p.intrinsics.as_array())
        lines.append(f"{i} " + " ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def parse_pose_lines(lines: Iterable[str], fps: float | None = None, convention: str = "world_from_camera") -> Trajectory:
    """Parse pose lines.

    ``convention`` states how the stored rotation/translation should be read:
    ``"world_from_camera"`` (native) or ``"camera_from_world"`` (inverted on load).
    """
    if convention not in ("world_from_camera", "camera_from_world"):
        raise ValueError(f"unknown pose convention {convention!r}")
    rows = []
    header_fps = None
    for line in lines:
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            parts = s[1:].split()
            if len(parts) == 2 and parts[0] == "fps":
                header_fps = float(parts[1])
            continue
        vals = s.split()
        if len(vals) != 12:
            raise ValueError(f"expected 12 columns, got {len(vals)}: {s!r}")
        rows.append((int(vals[0]), [float(v) for v in vals[1:]]))
    if not rows:
        raise EmptyTrajectory("pose file has no frames")
    rows.sort(key=lambda r: r[0])
    poses = []
    for _, v in rows:
        q = Quaternion(*v[0:4])
        t = np.array(v[4:7])
        K = Intrinsics(*v[7:11])
        if convention == "camera_from_world":
            q = q.conjugate()
            t = -(q.to_matrix() @ t)
        poses.append(CameraPose(q, t, K))
    fps = fps if fps is not None else (header_fps if header_fps is not None else 30.0)
    return Trajectory(tuple(poses), fps)


def read_pose_file(path, fps: float | None = None, convention: str = "world_from_camera") -> Trajectory:
    with open(path) as fh:
        return parse_pose_lines(fh, fps=fps, convention=convention)


def with_intrinsics(traj: Trajectory, intrinsics: Intrinsics) -> Trajectory:
    return Trajectory(tuple(replace(p, intrinsics=intrinsics) for p in traj.poses), traj.fps)


def stack_poses(poses: Sequence[CameraPose]):
    """Arrays ``(R (N,3,3), centers (N,3), intrinsics (N,4))`` for a pose sequence."""
    q = np.array([p.rotation.as_array() for p in poses])
    return quats_to_matrices(q), np.array([p.translation for p in poses]), np.array([p.intrinsics.as_array() for p in poses])
