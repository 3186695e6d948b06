"""Forward tile-based Gaussian splatting rasterizer.

Each frame goes through three stages:

1. ``_project_kernel`` pushes every 3D covariance through the linearised
   pinhole projection (EWA footprint), adds the low-pass term and culls
   gaussians behind the near plane, below the minimum peak alpha or fully
   outside the image.
2. Surviving gaussians are globally sorted by view depth (stable, so ties keep
   primitive order) and binned into 16x16 pixel tiles.
3. ``_raster_kernel`` composites each tile front to back in parallel.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numba
import numpy as np

from .errors import UncoveredFrameIndex
from .gaussians import GaussianScene
from .geometry import CameraPose, SimilarityTransform, Trajectory, compose


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 16
    low_pass: float = 0.3  # px^2 added to every screen-space covariance
    alpha_clamp: float = 0.99
    min_peak_alpha: float = 1.0 / 255.0
    # per-pixel contributions below this are skipped; keeps footprints within 1e-3 of exact
    alpha_cutoff: float = 1e-3
    min_transmittance: float = 1e-4
    near: float = 1e-4


DEFAULT_CONFIG = RenderConfig()


@dataclass(frozen=True)
class RenderedFrame:
    """Color ``(H,W,3)``, accumulated alpha ``(H,W)`` and expected depth ``(H,W)`` (0 where alpha is 0)."""

    color: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray

    @property
    def resolution(self) -> tuple[int, int]:
        return self.alpha.shape[1], self.alpha.shape[0]


@dataclass(frozen=True)
class SplatProjection:
    """Screen-space footprints of the gaussians that survive culling (in sorted order)."""

    index: np.ndarray  # primitive index, sorted by depth
    means2d: np.ndarray
    cov2d: np.ndarray  # (n,2,2) px^2, low-pass included
    depths: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray


@numba.njit(cache=True)
def _project_kernel(means, scales, rots, opac, Rcw, center, fx, fy, cx, cy, W, H, tile,
                    low_pass, near, min_peak, cutoff, clamp):
    n = means.shape[0]
    valid = np.zeros(n, dtype=np.bool_)
    depth = np.empty(n)
    uv = np.empty((n, 2))
    cov = np.empty((n, 3))
    conic = np.empty((n, 3))
    log_thr = np.empty(n)
    rect = np.zeros((n, 4), dtype=np.int64)
    pix = np.zeros((n, 4), dtype=np.int64)
    gx = (W + tile - 1) // tile
    gy = (H + tile - 1) // tile
    limx = 1.3 * max(cx, W - cx) / fx
    limy = 1.3 * max(cy, H - cy) / fy
    for g in range(n):
        op = opac[g]
        peak = min(op, clamp)
        if peak < min_peak:
            continue
        dx0 = means[g, 0] - center[0]
        dy0 = means[g, 1] - center[1]
        dz0 = means[g, 2] - center[2]
        x = Rcw[0, 0] * dx0 + Rcw[0, 1] * dy0 + Rcw[0, 2] * dz0
        y = Rcw[1, 0] * dx0 + Rcw[1, 1] * dy0 + Rcw[1, 2] * dz0
        z = Rcw[2, 0] * dx0 + Rcw[2, 1] * dy0 + Rcw[2, 2] * dz0
        if z <= near:
            continue
        u = fx * x / z + cx
        v = fy * y / z + cy
        qmax = 2.0 * math.log(op / cutoff)
        if qmax <= 0.0:
            continue
        # conservative off-screen test before the covariance work
        smax = max(scales[g, 0], max(scales[g, 1], scales[g, 2]))
        txz = min(max(x / z, -limx), limx)
        tyz = min(max(y / z, -limy), limy)
        jn2 = (fx / z) ** 2 * (1.0 + txz * txz) + (fy / z) ** 2 * (1.0 + tyz * tyz)
        ext = math.sqrt(qmax * (jn2 * smax * smax + low_pass)) + 1.0
        if u + ext < 0.0 or u - ext > W or v + ext < 0.0 or v - ext > H:
            continue

        qw = rots[g, 0]
        qx = rots[g, 1]
        qy = rots[g, 2]
        qz = rots[g, 3]
        qn = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        qw /= qn
        qx /= qn
        qy /= qn
        qz /= qn
        r00 = 1 - 2 * (qy * qy + qz * qz)
        r01 = 2 * (qx * qy - qw * qz)
        r02 = 2 * (qx * qz + qw * qy)
        r10 = 2 * (qx * qy + qw * qz)
        r11 = 1 - 2 * (qx * qx + qz * qz)
        r12 = 2 * (qy * qz - qw * qx)
        r20 = 2 * (qx * qz - qw * qy)
        r21 = 2 * (qy * qz + qw * qx)
        r22 = 1 - 2 * (qx * qx + qy * qy)
        s0 = scales[g, 0] * scales[g, 0]
        s1 = scales[g, 1] * scales[g, 1]
        s2 = scales[g, 2] * scales[g, 2]
        # world covariance R diag(s^2) R^T
        c00 = r00 * r00 * s0 + r01 * r01 * s1 + r02 * r02 * s2
        c01 = r00 * r10 * s0 + r01 * r11 * s1 + r02 * r12 * s2
        c02 = r00 * r20 * s0 + r01 * r21 * s1 + r02 * r22 * s2
        c11 = r10 * r10 * s0 + r11 * r11 * s1 + r12 * r12 * s2
        c12 = r10 * r20 * s0 + r11 * r21 * s1 + r12 * r22 * s2
        c22 = r20 * r20 * s0 + r21 * r21 * s1 + r22 * r22 * s2

        tx = min(max(x / z, -limx), limx) * z
        ty = min(max(y / z, -limy), limy) * z
        j00 = fx / z
        j02 = -fx * tx / (z * z)
        j11 = fy / z
        j12 = -fy * ty / (z * z)
        # T = J @ Rcw  (2x3)
        t00 = j00 * Rcw[0, 0] + j02 * Rcw[2, 0]
        t01 = j00 * Rcw[0, 1] + j02 * Rcw[2, 1]
        t02 = j00 * Rcw[0, 2] + j02 * Rcw[2, 2]
        t10 = j11 * Rcw[1, 0] + j12 * Rcw[2, 0]
        t11 = j11 * Rcw[1, 1] + j12 * Rcw[2, 1]
        t12 = j11 * Rcw[1, 2] + j12 * Rcw[2, 2]
        # T C
        m00 = t00 * c00 + t01 * c01 + t02 * c02
        m01 = t00 * c01 + t01 * c11 + t02 * c12
        m02 = t00 * c02 + t01 * c12 + t02 * c22
        m10 = t10 * c00 + t11 * c01 + t12 * c02
        m11 = t10 * c01 + t11 * c11 + t12 * c12
        m12 = t10 * c02 + t11 * c12 + t12 * c22
        a = m00 * t00 + m01 * t01 + m02 * t02 + low_pass
        b = m00 * t10 + m01 * t11 + m02 * t12
        c = m10 * t10 + m11 * t11 + m12 * t12 + low_pass
        det = a * c - b * b
        if det <= 0.0:
            continue
        ex = math.sqrt(qmax * a)
        ey = math.sqrt(qmax * c)
        # pixel (i, j) is sampled at (i + 0.5, j + 0.5)
        i0 = math.ceil(u - ex - 0.5)
        i1 = math.floor(u + ex - 0.5)
        j0 = math.ceil(v - ey - 0.5)
        j1 = math.floor(v + ey - 0.5)
        i0 = max(i0, 0)
        j0 = max(j0, 0)
        i1 = min(i1, W - 1)
        j1 = min(j1, H - 1)
        if i0 > i1 or j0 > j1:
            continue
        valid[g] = True
        depth[g] = z
        uv[g, 0] = u
        uv[g, 1] = v
        cov[g, 0] = a
        cov[g, 1] = b
        cov[g, 2] = c
        conic[g, 0] = c / det
        conic[g, 1] = -b / det
        conic[g, 2] = a / det
        log_thr[g] = math.log(cutoff / op)
        pix[g, 0] = i0
        pix[g, 1] = i1
        pix[g, 2] = j0
        pix[g, 3] = j1
        rect[g, 0] = i0 // tile
        rect[g, 1] = j0 // tile
        rect[g, 2] = min(i1 // tile, gx - 1)
        rect[g, 3] = min(j1 // tile, gy - 1)
    return valid, depth, uv, cov, conic, log_thr, rect, pix


@numba.njit(cache=True)
def _bin_kernel(rect, n_tiles, gx):
    """Per-tile lists of splat positions, kept in depth order."""
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for g in range(rect.shape[0]):
        for ty in range(rect[g, 1], rect[g, 3] + 1):
            for tx in range(rect[g, 0], rect[g, 2] + 1):
                counts[ty * gx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for g in range(rect.shape[0]):
        for ty in range(rect[g, 1], rect[g, 3] + 1):
            for tx in range(rect[g, 0], rect[g, 2] + 1):
                t = ty * gx + tx
                ids[fill[t]] = g
                fill[t] += 1
    return offsets, ids


@numba.njit(cache=True)
def _depth_order(valid, depth):
    """Indices of valid splats sorted by depth, ties by index (stable LSD radix sort)."""
    idx = np.flatnonzero(valid)
    m = idx.shape[0]
    # positive float64 bit patterns sort like the floats themselves
    keys = depth[idx].view(np.int64)
    out = idx.copy()
    tmp = np.empty_like(out)
    kk = keys.copy()
    ktmp = np.empty_like(kk)
    for shift in range(0, 64, 16):
        counts = np.zeros(65537, dtype=np.int64)
        for k in range(m):
            counts[((kk[k] >> shift) & 0xFFFF) + 1] += 1
        if counts[1:].max() == m:
            continue
        for b in range(65536):
            counts[b + 1] += counts[b]
        for k in range(m):
            d = (kk[k] >> shift) & 0xFFFF
            pos = counts[d]
            counts[d] = pos + 1
            tmp[pos] = out[k]
            ktmp[pos] = kk[k]
        out, tmp = tmp, out
        kk, ktmp = ktmp, kk
    return out


@numba.njit(cache=True)
def _pack_kernel(order, uv, conic, log_thr, pix, rect, opac, colors, depth):
    """Gather per-splat raster inputs contiguously in depth order."""
    m = order.shape[0]
    feat = np.empty((m, 11))
    box = np.empty((m, 4), dtype=np.int64)
    tiles = np.empty((m, 4), dtype=np.int64)
    for k in range(m):
        g = order[k]
        feat[k, 0] = uv[g, 0]
        feat[k, 1] = uv[g, 1]
        feat[k, 2] = conic[g, 0]
        feat[k, 3] = conic[g, 1]
        feat[k, 4] = conic[g, 2]
        feat[k, 5] = log_thr[g]
        feat[k, 6] = opac[g]
        feat[k, 7] = colors[g, 0]
        feat[k, 8] = colors[g, 1]
        feat[k, 9] = colors[g, 2]
        feat[k, 10] = depth[g]
        for c in range(4):
            box[k, c] = pix[g, c]
            tiles[k, c] = rect[g, c]
    return feat, box, tiles


@numba.njit(cache=True, parallel=True, fastmath=True)
def _raster_kernel(offsets, ids, feat, pix, bg, W, H, tile, gx, n_tiles, clamp, t_min):
    out_c = np.empty((H, W, 3))
    out_a = np.empty((H, W))
    out_d = np.empty((H, W))
    for t in numba.prange(n_tiles):
        tx0 = (t % gx) * tile
        ty0 = (t // gx) * tile
        tx1 = min(tx0 + tile, W) - 1
        ty1 = min(ty0 + tile, H) - 1
        tw = tx1 - tx0 + 1
        npix = tw * (ty1 - ty0 + 1)
        T = np.ones(npix)
        acc = np.zeros((npix, 4))
        done = 0
        # splats arrive front to back; each only touches its clipped footprint
        for k in range(offsets[t], offsets[t + 1]):
            g = ids[k]
            u = feat[g, 0]
            v = feat[g, 1]
            ca = feat[g, 2]
            cb = feat[g, 3]
            cc = feat[g, 4]
            thr = feat[g, 5]
            op = feat[g, 6]
            cr = feat[g, 7]
            cg = feat[g, 8]
            cbl = feat[g, 9]
            dg = feat[g, 10]
            q = math.exp(-ca)
            ia = max(pix[g, 0], tx0)
            ib = min(pix[g, 1], tx1)
            for j in range(max(pix[g, 2], ty0), min(pix[g, 3], ty1) + 1):
                dy = j + 0.5 - v
                row = (j - ty0) * tw - tx0
                # the exponent is quadratic along a row: step it and its exp incrementally
                dx = ia + 0.5 - u
                power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                step = -ca * (dx + 0.5) - cb * dy
                e = math.exp(power)
                r = math.exp(step)
                for i in range(ia, ib + 1):
                    if power >= thr:
                        p = row + i
                        Tp = T[p]
                        if Tp >= t_min:
                            alpha = op * e
                            if alpha > clamp:
                                alpha = clamp
                            w = alpha * Tp
                            acc[p, 0] += w * cr
                            acc[p, 1] += w * cg
                            acc[p, 2] += w * cbl
                            acc[p, 3] += w * dg
                            Tp *= 1.0 - alpha
                            T[p] = Tp
                            if Tp < t_min:
                                done += 1
                    power += step
                    step -= ca
                    e *= r
                    r *= q
            if done == npix:
                break
        for j in range(ty0, ty1 + 1):
            for i in range(tx0, tx1 + 1):
                p = (j - ty0) * tw + (i - tx0)
                Tp = T[p]
                a = 1.0 - Tp
                out_c[j, i, 0] = acc[p, 0] + Tp * bg[0]
                out_c[j, i, 1] = acc[p, 1] + Tp * bg[1]
                out_c[j, i, 2] = acc[p, 2] + Tp * bg[2]
                out_a[j, i] = a
                out_d[j, i] = acc[p, 3] / a if a > 0.0 else 0.0
    return out_c, out_a, out_d


def _camera_args(pose: CameraPose):
    Rcw = np.ascontiguousarray(pose.rotation_matrix().T)
    K = pose.intrinsics
    return Rcw, np.array(pose.translation), K.fx, K.fy, K.cx, K.cy


def _project(scene: GaussianScene, pose: CameraPose, resolution, config: RenderConfig):
    W, H = int(resolution[0]), int(resolution[1])
    Rcw, c, fx, fy, cx, cy = _camera_args(pose)
    out = _project_kernel(
        scene.means, scene.scales, scene.rotations, scene.opacities, Rcw, c, fx, fy, cx, cy, W, H,
        config.tile_size, config.low_pass, config.near, config.min_peak_alpha, config.alpha_cutoff, config.alpha_clamp,
    )
    return _depth_order(out[0], out[1]), out


def project_gaussians(scene: GaussianScene, pose: CameraPose, resolution, config: RenderConfig = DEFAULT_CONFIG) -> SplatProjection:
    """Screen-space footprints of the gaussians that would be rasterized, depth-sorted."""
    order, (_, depth, uv, cov, *_rest) = _project(scene, pose, resolution, config)
    c = cov[order]
    cov2d = np.stack([np.stack([c[:, 0], c[:, 1]], -1), np.stack([c[:, 1], c[:, 2]], -1)], 1)
    return SplatProjection(order, uv[order], cov2d, depth[order], scene.opacities[order], scene.colors[order])


def render(scene: GaussianScene, pose: CameraPose, resolution, config: RenderConfig = DEFAULT_CONFIG) -> RenderedFrame:
    """Render ``scene`` from ``pose`` at ``resolution = (W, H)``."""
    W, H = int(resolution[0]), int(resolution[1])
    if W <= 0 or H <= 0:
        raise ValueError("resolution must be positive")
    bg = np.asarray(scene.background, dtype=float)
    if len(scene) == 0:
        return RenderedFrame(np.broadcast_to(bg, (H, W, 3)).copy(), np.zeros((H, W)), np.zeros((H, W)))
    tile = config.tile_size
    gx, gy = (W + tile - 1) // tile, (H + tile - 1) // tile
    order, (_, depth, uv, _, conic, log_thr, rect, pix) = _project(scene, pose, resolution, config)
    feat, box, tiles = _pack_kernel(order, uv, conic, log_thr, pix, rect, scene.opacities, scene.colors, depth)
    offsets, ids = _bin_kernel(tiles, gx * gy, gx)
    color, alpha, dmap = _raster_kernel(
        offsets, ids, feat, box, bg, W, H, tile, gx, gx * gy, config.alpha_clamp, config.min_transmittance,
    )
    return RenderedFrame(color, alpha, dmap)


# -- video -----------------------------------------------------------------------


@dataclass
class VideoRender:
    frames: list[RenderedFrame]
    frame_seconds: list[float]

    @property
    def total_seconds(self) -> float:
        return float(sum(self.frame_seconds))


def frame_assignment(n_frames: int, chunk_ranges: Sequence[tuple[int, int]]) -> np.ndarray:
    """Chunk index for every frame; overlapping ranges resolve to the earlier chunk."""
    assign = np.full(n_frames, -1, dtype=np.int64)
    for j, (a, b) in enumerate(chunk_ranges):
        sl = assign[a:b]
        sl[sl < 0] = j
    missing = np.flatnonzero(assign < 0)
    if len(missing):
        raise UncoveredFrameIndex(f"{len(missing)} frame(s) not covered by any chunk, first is {missing[0]}")
    return assign


def iter_render_video(
    scenes,
    traj: Trajectory,
    resolution,
    chunk_ranges: Sequence[tuple[int, int]] | None = None,
    transforms: Sequence[SimilarityTransform] | SimilarityTransform | None = None,
    config: RenderConfig = DEFAULT_CONFIG,
    assignment: np.ndarray | None = None,
) -> Iterator[tuple[int, RenderedFrame, float]]:
    """Yield ``(frame_index, frame, seconds)`` in trajectory order.

    ``scenes`` is a single scene or one scene per chunk.  ``transforms`` maps
    trajectory coordinates into each scene's frame (``None`` for identity).
    """
    if isinstance(scenes, GaussianScene):
        scenes = [scenes]
        if transforms is not None and not isinstance(transforms, SimilarityTransform):
            transforms = transforms[0]
        transforms = [transforms]
        assign = np.zeros(len(traj), dtype=np.int64)
    else:
        scenes = list(scenes)
        if transforms is None:
            transforms = [None] * len(scenes)
        if assignment is not None:
            assign = np.asarray(assignment, dtype=np.int64)
            if assign.shape != (len(traj),) or np.any(assign < 0) or np.any(assign >= len(scenes)):
                raise UncoveredFrameIndex("frame assignment does not map every frame to a chunk")
        else:
            if chunk_ranges is None:
                if len(scenes) != 1:
                    raise UncoveredFrameIndex("chunk ranges are required with several scenes")
                chunk_ranges = [(0, len(traj))]
            assign = frame_assignment(len(traj), chunk_ranges)
    for i, pose in enumerate(traj.poses):
        j = int(assign[i])
        S = transforms[j]
        t0 = time.perf_counter()
        frame = render(scenes[j], pose if S is None else compose(S, pose), resolution, config)
        yield i, frame, time.perf_counter() - t0


def render_video(scenes, traj: Trajectory, resolution, chunk_ranges=None, transforms=None,
                 config: RenderConfig = DEFAULT_CONFIG) -> VideoRender:
    frames, secs = [], []
    for _, frame, dt in iter_render_video(scenes, traj, resolution, chunk_ranges, transforms, config):
        frames.append(frame)
        secs.append(dt)
    return VideoRender(frames, secs)


# -- frame files -----------------------------------------------------------------


def to_uint8(color: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(color, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, color: np.ndarray) -> None:
    """Binary P6, 8 bits per channel."""
    img = to_uint8(color)
    H, W = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a P6 file written by :func:`write_ppm` as ``uint8 (H, W, 3)``."""
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    W, H, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    pos += 1
    return np.frombuffer(data, dtype=np.uint8, count=W * H * 3, offset=pos).reshape(H, W, 3)


def write_frame(directory, index: int, frame: RenderedFrame, sidecars: bool = False) -> Path:
    directory = Path(directory)
    path = directory / f"frame_{index:05d}.ppm"
    write_ppm(path, frame.color)
    if sidecars:
        frame.alpha.astype("<f4").tofile(directory / f"frame_{index:05d}.alpha.f32")
        frame.depth.astype("<f4").tofile(directory / f"frame_{index:05d}.depth.f32")
    return path


def read_sidecar(path, resolution) -> np.ndarray:
    W, H = resolution
    return np.fromfile(path, dtype="<f4").reshape(H, W).astype(np.float64)
