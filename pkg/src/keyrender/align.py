"""Keyframe reconstruction, trajectory-to-reconstruction similarity fits and temporal chunk stitching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import CountMismatch, DegenerateConfiguration, MissingManifest, NoValidDepth
from .gaussians import GaussianScene, read_splat, write_splat
from .geometry import CameraPose, Quaternion, SimilarityTransform, Trajectory, compose, quat_from_rotation_matrix
from .synth import Keyframe

_FRAC_BITS = 20  # fixed-point resolution of point offsets inside a voxel
_COLOR_BITS = 24
_RANK_TOL = 1e-6
EDGE_SCALE = 9.0  # depth-edge threshold times focal length in pixels


# -- reconstruction --------------------------------------------------------------


def depth_edges(depth: np.ndarray, tolerance: float = 0.05) -> np.ndarray:
    """Pixels whose 3x3 neighbourhood spans a relative inverse-depth jump above ``tolerance``.

    Expected depth blends foreground and background across silhouettes, which
    would lift such pixels to points floating in free space.
    """
    w = np.where(depth > 0, 1.0 / np.maximum(depth, 1e-12), 0.0)
    span = ndimage.maximum_filter(w, 3) - ndimage.minimum_filter(w, 3)
    return span > tolerance * w


def keyframe_points(kf: Keyframe, background=(0.0, 0.0, 0.0), alpha_threshold: float = 0.5,
                    edge_scale: float | None = EDGE_SCALE):
    """World points and un-blended colors for every pixel with alpha >= threshold.

    Pixels on depth discontinuities are dropped unless ``edge_scale`` is None.
    The edge tolerance is ``edge_scale / fx``: a slanted plane changes inverse
    depth per pixel in proportion to the pixel's angular size, so a fixed
    tolerance would eat whole floors at low resolution.
    """
    keep = kf.alpha >= alpha_threshold
    if edge_scale is not None:
        keep &= ~depth_edges(kf.depth, edge_scale / kf.pose.intrinsics.fx)
    jj, ii = np.nonzero(keep)
    if len(ii) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    pose = kf.pose
    K = pose.intrinsics
    z = kf.depth[jj, ii]
    ok = np.isfinite(z) & (z > 0)
    ii, jj, z = ii[ok], jj[ok], z[ok]
    x = (ii + 0.5 - K.cx) / K.fx * z
    y = (jj + 0.5 - K.cy) / K.fy * z
    pts = np.stack([x, y, z], axis=1) @ pose.rotation_matrix().T + pose.center
    a = kf.alpha[jj, ii][:, None]
    col = (kf.image[jj, ii] - (1.0 - a) * np.asarray(background, dtype=float)) / a
    return pts, np.clip(col, 0.0, 1.0)


def default_voxel_size(points: np.ndarray) -> float:
    """Bounding-box diagonal of ``points`` over 256."""
    diag = float(np.linalg.norm(points.max(0) - points.min(0)))
    return diag / 256.0 if diag > 0 else 1e-3


def reconstruct(
    keyframes: Sequence[Keyframe],
    voxel_size: float | None = None,
    background=(0.0, 0.0, 0.0),
    alpha_threshold: float = 0.5,
    opacity: float = 0.95,
    edge_scale: float | None = EDGE_SCALE,
) -> GaussianScene:
    """Voxelized splat scene from keyframe images, depths and poses.

    Every pixel with enough alpha and away from depth edges is lifted to its
    expected-depth point.  Points are bucketed on a grid anchored at the world
    origin and each occupied voxel yields one isotropic gaussian at the point
    centroid with the mean color.
    Accumulation is done in integer fixed point, so the result does not depend
    on keyframe order.
    """
    if not len(keyframes):
        raise NoValidDepth("no keyframes to reconstruct from")
    pts, cols = zip(*(keyframe_points(kf, background, alpha_threshold, edge_scale) for kf in keyframes))
    pts, cols = np.concatenate(pts), np.concatenate(cols)
    if len(pts) == 0:
        raise NoValidDepth("no keyframe pixel has valid depth")
    if voxel_size is None:
        voxel_size = default_voxel_size(pts)
    if not voxel_size > 0:
        raise ValueError("voxel size must be positive")

    g = pts / voxel_size
    keys = np.floor(g).astype(np.int64)
    one = 1 << _FRAC_BITS
    frac = np.clip(np.rint((g - keys) * one).astype(np.int64), 0, one)
    cq = np.rint(cols * (1 << _COLOR_BITS)).astype(np.int64)

    rel = keys - keys.min(0)
    if rel.max() >= 1 << 21:
        raise ValueError("voxel grid too large; increase voxel_size")
    code = (rel[:, 0] << 42) | (rel[:, 1] << 21) | rel[:, 2]
    order = np.argsort(code, kind="stable")
    code = code[order]
    starts = np.flatnonzero(np.r_[True, code[1:] != code[:-1]])
    n = np.diff(np.r_[starts, len(code)])
    frac, cq, keys = frac[order], cq[order], keys[order]

    s1 = np.add.reduceat(frac, starts, axis=0)
    s2 = np.add.reduceat(frac * frac, starts, axis=0)
    sc = np.add.reduceat(cq, starts, axis=0)

    nf = n[:, None].astype(float)
    mean_frac = s1 / nf
    means = (keys[starts] + mean_frac / one) * voxel_size
    var = np.maximum(s2 / nf - mean_frac**2, 0.0) / float(one) ** 2 * voxel_size**2
    sigma = np.maximum(voxel_size / 2.0, np.sqrt(var.sum(1) / 3.0))
    colors = sc / nf / (1 << _COLOR_BITS)
    m = len(starts)
    rot = np.zeros((m, 4))
    rot[:, 0] = 1.0
    return GaussianScene(means, np.repeat(sigma[:, None], 3, axis=1), rot, np.full(m, opacity), colors, background)


# -- similarity fitting ----------------------------------------------------------


def _centers(poses: Sequence[CameraPose]) -> np.ndarray:
    return np.array([p.center for p in poses], dtype=float).reshape(-1, 3)


def _average_rotation(Rs: np.ndarray) -> np.ndarray:
    """Chordal mean of rotations via the dominant eigenvector of the quaternion scatter."""
    qs = np.array([quat_from_rotation_matrix(R).as_array() for R in Rs])
    w, v = np.linalg.eigh(qs.T @ qs)
    return Quaternion.from_array(v[:, -1]).to_matrix()


def similarity_residuals(S: SimilarityTransform, src: Sequence[CameraPose], dst: Sequence[CameraPose]) -> np.ndarray:
    """Per-pose center error ``|S(c_src) - c_dst|``."""
    return np.linalg.norm(S.apply(_centers(src)) - _centers(dst), axis=1)


def fit_similarity(src: Sequence[CameraPose], dst: Sequence[CameraPose], allow_fallback: bool = False,
                   return_residual: bool = False):
    """Least-squares similarity ``S`` with ``S(c_src) ~ c_dst`` over camera centers.

    Closed-form (Umeyama) solution with reflection guard.  The strict mode needs
    at least three poses whose centered centers span at least a plane.  With
    ``allow_fallback`` two poses or collinear centers are accepted: the rotation
    then comes from averaging the relative orientations ``R_dst R_src^T`` and
    scale and translation from the centers given that rotation.

    Returns the transform, or ``(transform, residual_rms)`` with ``return_residual``.
    """
    if len(src) != len(dst):
        raise CountMismatch(f"{len(src)} source poses vs {len(dst)} target poses")
    cs, cd = _centers(src), _centers(dst)
    n = len(cs)
    min_count = 2 if allow_fallback else 3
    if n < min_count:
        raise DegenerateConfiguration(f"similarity fit needs at least {min_count} poses, got {n}")
    mu_s, mu_d = cs.mean(0), cd.mean(0)
    xs, xd = cs - mu_s, cd - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    extent = max(np.abs(cs).max(), 1.0)
    if sv[0] <= 1e-12 * extent:
        raise DegenerateConfiguration("source camera centers coincide")
    planar = n >= 3 and sv[1] > _RANK_TOL * sv[0]
    if planar:
        U, D, Vt = np.linalg.svd(xd.T @ xs / n)
        E = np.ones(3)
        if np.linalg.det(U) * np.linalg.det(Vt) < 0:
            E[2] = -1.0
        R = (U * E) @ Vt
        scale = float((D * E).sum() / (xs**2).sum(1).mean())
    elif allow_fallback:
        R = _average_rotation(np.array([d.rotation_matrix() @ s.rotation_matrix().T for s, d in zip(src, dst)]))
        scale = float(np.einsum("ij,ij->", xs @ R.T, xd) / (xs**2).sum())
    else:
        raise DegenerateConfiguration("source camera centers are collinear")
    if not scale > 0:
        raise DegenerateConfiguration("fitted scale is not positive")
    t = mu_d - scale * R @ mu_s
    S = SimilarityTransform.from_matrix(scale, R, t)
    if return_residual:
        r = similarity_residuals(S, src, dst)
        return S, float(np.sqrt(np.mean(r**2)))
    return S


def canonical_gauge(poses: Sequence[CameraPose]) -> SimilarityTransform:
    """Frame in which ``poses[0]`` is the identity at the origin and centers have unit mean distance from it.

    This is the coordinate convention of a reconstruction that only sees images:
    it knows neither the world frame nor the metric scale.
    """
    p0 = poses[0]
    R0 = p0.rotation_matrix()
    d = np.linalg.norm(_centers(poses) - p0.center, axis=1)
    s = 1.0 / d[1:].mean() if len(d) > 1 and d[1:].mean() > 0 else 1.0
    return SimilarityTransform.from_matrix(s, R0.T, -s * R0.T @ p0.center)


@dataclass
class ChunkReconstruction:
    scene: GaussianScene
    poses: list[CameraPose]  # keyframe poses as estimated in the scene's own frame


def reconstruct_chunk(keyframes: Sequence[Keyframe], voxel_size: float | None = None, background=(0.0, 0.0, 0.0),
                      gauge: bool = True) -> ChunkReconstruction:
    """Reconstruct and express scene and keyframe poses in the chunk's own gauge."""
    scene = reconstruct(keyframes, voxel_size, background)
    poses = [kf.pose for kf in keyframes]
    if not gauge:
        return ChunkReconstruction(scene, poses)
    G = canonical_gauge(poses)
    return ChunkReconstruction(scene.transformed(G), [compose(G, p) for p in poses])


# -- chunking --------------------------------------------------------------------


@dataclass
class ChunkPlan:
    """Keyframe positions per chunk and dense frame ranges.

    ``keyframes[j]`` lists positions into the keyframe sequence; for ``j > 0`` its
    first entry is ``shared[j-1]``, the last keyframe of chunk ``j-1``.
    ``frame_ranges[j]`` is a half-open range of dense frame indices.
    """

    keyframe_indices: list[int]
    keyframes: list[list[int]]
    shared: list[int]
    frame_ranges: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.keyframes)

    def to_dict(self) -> dict:
        return {
            "keyframe_indices": list(self.keyframe_indices),
            "keyframes": [list(k) for k in self.keyframes],
            "shared": list(self.shared),
            "frame_ranges": [list(r) for r in self.frame_ranges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChunkPlan":
        return cls(list(d["keyframe_indices"]), [list(k) for k in d["keyframes"]], list(d["shared"]),
                   [tuple(r) for r in d["frame_ranges"]])


def make_chunk_plan(keyframe_indices: Sequence[int], traj: Trajectory, chunk_duration_s: float = 10.0,
                    min_keyframes: int = 2) -> ChunkPlan:
    """Split keyframes into consecutive time spans of ``chunk_duration_s``.

    Keyframe ``k`` at time ``t_k`` goes to span ``c`` with ``c*D < t_k <= (c+1)*D``
    (``t = 0`` belongs to the first span), so a keyframe exactly on a boundary
    closes the earlier chunk and is then shared with the next one.  Spans owning
    fewer than ``min_keyframes`` keyframes are merged into their successor (the
    last one into its predecessor).  Dense frames go to the chunk whose keyframe
    span contains them, boundary frames to the earlier chunk.
    """
    idx = [int(i) for i in keyframe_indices]
    if not idx:
        raise ValueError("no keyframes")
    if any(b <= a for a, b in zip(idx, idx[1:])) or idx[0] < 0 or idx[-1] >= len(traj):
        raise ValueError("keyframe indices must be strictly increasing and inside the trajectory")
    if not chunk_duration_s > 0:
        raise ValueError("chunk duration must be positive")
    t = np.asarray(idx, dtype=float) / traj.fps
    span = np.maximum(np.ceil(t / chunk_duration_s - 1e-9) - 1, 0).astype(int)
    groups: list[list[int]] = []
    for pos, c in enumerate(span):
        if groups and span[groups[-1][0]] == c:
            groups[-1].append(pos)
        else:
            groups.append([pos])
    merged: list[list[int]] = []
    for g in groups:
        if merged and len(merged[-1]) < min_keyframes:
            merged[-1].extend(g)
        else:
            merged.append(list(g))
    if len(merged) > 1 and len(merged[-1]) < min_keyframes:
        merged[-2].extend(merged.pop())

    chunks = [merged[0]]
    shared = []
    for g in merged[1:]:
        shared.append(chunks[-1][-1])
        chunks.append([chunks[-1][-1]] + g)
    ranges = []
    for j, c in enumerate(chunks):
        start = 0 if j == 0 else idx[c[0]] + 1
        end = len(traj) if j == len(chunks) - 1 else idx[c[-1]] + 1
        ranges.append((start, end))
    return ChunkPlan(idx, chunks, shared, ranges)


# -- alignment -------------------------------------------------------------------


def _rigid_pose_correction(current: CameraPose, target: CameraPose) -> SimilarityTransform:
    """Rigid ``C`` with ``compose(C, current) == target``."""
    R = target.rotation_matrix() @ current.rotation_matrix().T
    return SimilarityTransform.from_matrix(1.0, R, target.center - R @ current.center)


@dataclass
class AlignedReconstruction:
    plan: ChunkPlan
    scenes: list[GaussianScene]
    transforms: list[SimilarityTransform]  # input-trajectory frame -> chunk frame
    corrections: list[SimilarityTransform]
    residuals: list[list[float]]  # per keyframe center error in each chunk
    boundary_mismatch: list[float] = field(default_factory=list)

    def save(self, directory, extra: dict | None = None) -> Path:
        """One SPLATv1 file per chunk and ``manifest.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for j, s in enumerate(self.scenes):
            name = f"chunk_{j:03d}.splat"
            write_splat(d / name, s)
            files.append(name)
        manifest = {
            "chunks": files,
            "transforms": [S.to_dict() for S in self.transforms],
            "corrections": [S.to_dict() for S in self.corrections],
            "chunk_ranges": [list(r) for r in self.plan.frame_ranges],
            "plan": self.plan.to_dict(),
            "residuals": self.residuals,
            "boundary_mismatch": self.boundary_mismatch,
            "background": [float(v) for v in self.scenes[0].background],
        }
        if extra:
            manifest.update(extra)
        path = d / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1))
        return path


def load_aligned(manifest_path) -> tuple[AlignedReconstruction, dict]:
    """Read a saved reconstruction back; also returns the raw manifest dict."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise MissingManifest(f"no manifest at {path}")
    m = json.loads(path.read_text())
    bg = m.get("background", (0.0, 0.0, 0.0))
    scenes = []
    for name in m["chunks"]:
        f = path.parent / name
        if not f.is_file():
            raise MissingManifest(f"chunk file {f} listed in manifest is missing")
        scenes.append(read_splat(f, bg))
    rec = AlignedReconstruction(
        ChunkPlan.from_dict(m["plan"]),
        scenes,
        [SimilarityTransform.from_dict(t) for t in m["transforms"]],
        [SimilarityTransform.from_dict(t) for t in m.get("corrections", [])],
        m.get("residuals", []),
        m.get("boundary_mismatch", []),
    )
    return rec, m


def align_chunks(plan: ChunkPlan, chunks: Sequence[ChunkReconstruction], traj: Trajectory) -> AlignedReconstruction:
    """Fit the input trajectory into each chunk and stitch shared keyframes exactly.

    Each chunk gets the similarity taking its input keyframe poses onto the
    poses estimated by that chunk's reconstruction.  For every later chunk a
    rigid correction is composed on top so the shared keyframe lands exactly on
    its estimated pose there; that is the pose it has in the previous chunk
    carried into this chunk's frame, so both sides of the seam render it from
    the same viewpoint.
    """
    if len(chunks) != len(plan):
        raise CountMismatch(f"{len(chunks)} reconstructions for {len(plan)} chunks")
    transforms, corrections, residuals, mismatch = [], [], [], []
    for j, (members, rec) in enumerate(zip(plan.keyframes, chunks)):
        src = [traj[plan.keyframe_indices[k]] for k in members]
        if len(rec.poses) != len(src):
            raise CountMismatch(f"chunk {j}: {len(rec.poses)} estimated poses for {len(src)} keyframes")
        try:
            S = fit_similarity(src, rec.poses, allow_fallback=True)
        except DegenerateConfiguration as exc:
            raise DegenerateConfiguration(str(exc), chunk=j) from exc
        C = SimilarityTransform.identity()
        if j > 0:
            C = _rigid_pose_correction(compose(S, src[0]), rec.poses[0])
            S = C @ S
            mismatch.append(float(np.linalg.norm(S.apply(src[0].center) - rec.poses[0].center)))
        transforms.append(S)
        corrections.append(C)
        residuals.append([float(r) for r in similarity_residuals(S, src, rec.poses)])
    return AlignedReconstruction(plan, [c.scene for c in chunks], transforms, corrections, residuals, mismatch)
