"""Keyframe-density predictor: pose tokens plus a scene token through a small transformer encoder."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import ShapeMismatch
from ..geometry import Trajectory, canonicalize_quaternions
from . import nn

TARGET_SCALE = 0.1


@dataclass(frozen=True)
class DensityConfig:
    width: int = 64
    heads: int = 4
    layers: int = 4
    ff_mult: int = 4
    descriptor_dim: int = 16
    max_tokens: int = 32  # trajectories are resampled to at most this many pose tokens

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("model width must be divisible by the number of heads")
        if min(self.width, self.heads, self.layers, self.ff_mult, self.descriptor_dim, self.max_tokens) < 1:
            raise ValueError("all model sizes must be positive")


def parameter_shapes(cfg: DensityConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.width, cfg.width * cfg.ff_mult
    shapes = [
        ("cam.W1", (7, d)), ("cam.b1", (d,)), ("cam.W2", (d, d)), ("cam.b2", (d,)),
        ("desc.W", (cfg.descriptor_dim, d)), ("desc.b", (d,)),
    ]
    for i in range(cfg.layers):
        p = f"block{i}."
        shapes += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "attn.Wqkv", (d, 3 * d)), (p + "attn.bqkv", (3 * d,)),
            (p + "attn.Wo", (d, d)), (p + "attn.bo", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "ff.W1", (d, f)), (p + "ff.b1", (f,)),
            (p + "ff.W2", (f, d)), (p + "ff.b2", (d,)),
        ]
    shapes += [("ln_f.g", (d,)), ("ln_f.b", (d,))]
    for i, (a, b) in enumerate([(d, d), (d, d), (d, d), (d, 1)]):
        shapes += [(f"head.W{i}", (a, b)), (f"head.b{i}", (b,))]
    return shapes


class DensityModelParams:
    """All parameters live in one flat float64 vector; ``self[name]`` is a view into it."""

    def __init__(self, config: DensityConfig, flat: np.ndarray | None = None):
        self.config = config
        self.shapes = parameter_shapes(config)
        size = sum(int(np.prod(s)) for _, s in self.shapes)
        if flat is None:
            flat = np.zeros(size)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (size,):
            raise ShapeMismatch(f"flat parameter vector has length {flat.size}, expected {size}")
        if not np.all(np.isfinite(flat)):
            raise ValueError("parameters must be finite")
        self.flat = flat
        self._views = self.views_of(flat)

    def views_of(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        views, off = {}, 0
        for name, shape in self.shapes:
            n = int(np.prod(shape))
            views[name] = flat[off : off + n].reshape(shape)
            off += n
        return views

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __len__(self) -> int:
        return self.flat.size

    def names(self) -> list[str]:
        return [n for n, _ in self.shapes]

    def copy(self) -> "DensityModelParams":
        return DensityModelParams(self.config, self.flat.copy())

    @classmethod
    def initialize(cls, config: DensityConfig = DensityConfig(), seed: int = 0) -> "DensityModelParams":
        """Normal weights with std ``1/sqrt(fan_in)``, zero biases, unit layer-norm gains."""
        rng = np.random.default_rng(seed)
        p = cls(config)
        for name, shape in p.shapes:
            leaf = name.rsplit(".", 1)[1]
            if leaf == "g":
                p[name][...] = 1.0
            elif len(shape) == 2:
                p[name][...] = rng.normal(scale=1.0 / np.sqrt(shape[0]), size=shape)
        return p

    # -- checkpoints ---------------------------------------------------------

    def save(self, path) -> tuple[Path, Path]:
        """Raw little-endian float64 vector at ``path`` plus ``path + '.json'`` shape manifest."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.flat.astype("<f8").tobytes())
        manifest = path.with_name(path.name + ".json")
        manifest.write_text(json.dumps({
            "config": asdict(self.config),
            "dtype": "<f8",
            "size": int(self.flat.size),
            "parameters": [[n, list(s)] for n, s in self.shapes],
        }, indent=1))
        return path, manifest

    @classmethod
    def load(cls, path) -> "DensityModelParams":
        path = Path(path)
        meta = json.loads(path.with_name(path.name + ".json").read_text())
        cfg = DensityConfig(**meta["config"])
        flat = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
        p = cls(cfg, flat)
        if [[n, list(s)] for n, s in p.shapes] != meta["parameters"]:
            raise ShapeMismatch(f"{path}: parameter layout does not match its manifest")
        return p


# -- inputs ----------------------------------------------------------------------


def pose_vectors(traj: Trajectory, max_tokens: int | None = None) -> np.ndarray:
    """``(n, 7)`` rows ``[qw, qx, qy, qz, tx, ty, tz]`` with sign-canonical quaternions.

    With ``max_tokens`` longer trajectories are resampled to that many evenly
    spaced poses (first and last included).
    """
    n = len(traj)
    if max_tokens is not None and n > max_tokens:
        if max_tokens == 1:
            idx = np.array([0])
        else:
            idx = np.floor(np.arange(max_tokens) * (n - 1) / (max_tokens - 1) + 0.5).astype(int)
    else:
        idx = np.arange(n)
    q = canonicalize_quaternions(traj.quaternions()[idx])
    return np.concatenate([q, traj.centers()[idx]], axis=1)


def embed_pose_tokens(params: DensityModelParams, traj: Trajectory | np.ndarray) -> np.ndarray:
    """Camera tokens ``(n, d)`` from the two-layer pose MLP."""
    x = traj if isinstance(traj, np.ndarray) else pose_vectors(traj, params.config.max_tokens)
    if x.ndim != 2 or x.shape[1] != 7:
        raise ShapeMismatch(f"pose vectors must be (n, 7), got {x.shape}")
    h, _ = nn.gelu_forward(x @ params["cam.W1"] + params["cam.b1"])
    return h @ params["cam.W2"] + params["cam.b2"]


# -- batched forward / backward --------------------------------------------------


def pad_batch(pose_list, descriptors):
    """Stack variable-length pose inputs into ``(B, nmax, 7)`` plus a validity mask."""
    B = len(pose_list)
    nmax = max(len(p) for p in pose_list)
    X = np.zeros((B, nmax, 7))
    mask = np.zeros((B, nmax + 1), dtype=bool)
    for b, p in enumerate(pose_list):
        X[b, : len(p)] = p
        mask[b, : len(p)] = True
        mask[b, nmax] = True  # the scene token always sits in the last slot
    return X, np.asarray(descriptors, dtype=float).reshape(B, -1), mask


def forward_batch(params: DensityModelParams, X: np.ndarray, D: np.ndarray, mask: np.ndarray, keep_cache: bool = False):
    """``ybar (B,)`` for padded pose inputs ``X (B, n, 7)`` and descriptors ``D (B, k)``."""
    cfg = params.config
    if X.ndim != 3 or X.shape[2] != 7:
        raise ShapeMismatch(f"pose inputs must be (B, n, 7), got {X.shape}")
    if D.shape != (X.shape[0], cfg.descriptor_dim):
        raise ShapeMismatch(f"descriptors must be (B, {cfg.descriptor_dim}), got {D.shape}")
    P = params
    caches = {}
    h1, _ = nn.linear_forward(X, P["cam.W1"], P["cam.b1"])
    g1, caches["cam.gelu"] = nn.gelu_forward(h1)
    cam, _ = nn.linear_forward(g1, P["cam.W2"], P["cam.b2"])
    desc, _ = nn.linear_forward(D, P["desc.W"], P["desc.b"])
    x = np.concatenate([cam, desc[:, None, :]], axis=1)
    caches["X"], caches["g1"], caches["D"] = X, g1, D
    for i in range(cfg.layers):
        p = f"block{i}."
        a, c_ln1 = nn.layernorm_forward(x, P[p + "ln1.g"], P[p + "ln1.b"])
        att, c_att = nn.attention_forward(a, P[p + "attn.Wqkv"], P[p + "attn.bqkv"], P[p + "attn.Wo"], P[p + "attn.bo"],
                                          cfg.heads, mask)
        x = x + att
        b, c_ln2 = nn.layernorm_forward(x, P[p + "ln2.g"], P[p + "ln2.b"])
        f1, _ = nn.linear_forward(b, P[p + "ff.W1"], P[p + "ff.b1"])
        fg, c_fg = nn.gelu_forward(f1)
        f2, _ = nn.linear_forward(fg, P[p + "ff.W2"], P[p + "ff.b2"])
        x = x + f2
        caches[i] = (c_ln1, c_att, c_ln2, b, c_fg, fg)
    z, caches["ln_f"] = nn.layernorm_forward(x, P["ln_f.g"], P["ln_f.b"])
    hs = [z]
    for i in range(3):
        h, _ = nn.linear_forward(hs[-1], P[f"head.W{i}"], P[f"head.b{i}"])
        g, caches[f"head.gelu{i}"] = nn.gelu_forward(h)
        hs.append(g)
    y, _ = nn.linear_forward(hs[-1], P["head.W3"], P["head.b3"])
    y = y[..., 0]
    w = mask / mask.sum(1, keepdims=True)
    ybar = (y * w).sum(1)
    if keep_cache:
        caches["hs"], caches["w"], caches["mask"] = hs, w, mask
        return ybar, caches
    return ybar


def backward_batch(params: DensityModelParams, dybar: np.ndarray, caches) -> np.ndarray:
    """Flat gradient of ``sum(dybar * ybar)`` with respect to every parameter."""
    cfg = params.config
    P = params
    grad = np.zeros_like(params.flat)
    G = params.views_of(grad)
    dy = (dybar[:, None] * caches["w"])[..., None]
    hs = caches["hs"]
    dh, G["head.W3"][...], G["head.b3"][...] = nn.linear_backward(dy, hs[3], P["head.W3"])
    for i in (2, 1, 0):
        dh = nn.gelu_backward(dh, caches[f"head.gelu{i}"])
        dh, G[f"head.W{i}"][...], G[f"head.b{i}"][...] = nn.linear_backward(dh, hs[i], P[f"head.W{i}"])
    dx, G["ln_f.g"][...], G["ln_f.b"][...] = nn.layernorm_backward(dh, caches["ln_f"], P["ln_f.g"])
    for i in reversed(range(cfg.layers)):
        p = f"block{i}."
        c_ln1, c_att, c_ln2, b, c_fg, fg = caches[i]
        dfg, G[p + "ff.W2"][...], G[p + "ff.b2"][...] = nn.linear_backward(dx, fg, P[p + "ff.W2"])
        df1 = nn.gelu_backward(dfg, c_fg)
        db, G[p + "ff.W1"][...], G[p + "ff.b1"][...] = nn.linear_backward(df1, b, P[p + "ff.W1"])
        dxn, G[p + "ln2.g"][...], G[p + "ln2.b"][...] = nn.layernorm_backward(db, c_ln2, P[p + "ln2.g"])
        dx = dx + dxn
        da, G[p + "attn.Wqkv"][...], G[p + "attn.bqkv"][...], G[p + "attn.Wo"][...], G[p + "attn.bo"][...] = (
            nn.attention_backward(dx, c_att, P[p + "attn.Wqkv"], P[p + "attn.Wo"], cfg.heads)
        )
        dxn, G[p + "ln1.g"][...], G[p + "ln1.b"][...] = nn.layernorm_backward(da, c_ln1, P[p + "ln1.g"])
        dx = dx + dxn
    dcam, ddesc = dx[:, :-1], dx[:, -1]
    _, G["desc.W"][...], G["desc.b"][...] = nn.linear_backward(ddesc, caches["D"], P["desc.W"])
    dg1, G["cam.W2"][...], G["cam.b2"][...] = nn.linear_backward(dcam, caches["g1"], P["cam.W2"])
    dh1 = nn.gelu_backward(dg1, caches["cam.gelu"])
    _, G["cam.W1"][...], G["cam.b1"][...] = nn.linear_backward(dh1, caches["X"], P["cam.W1"])
    return grad


# -- single-sample API -----------------------------------------------------------


def forward(params: DensityModelParams, traj: Trajectory | np.ndarray, descriptor) -> float:
    """Mean of the per-token regression outputs over all pose tokens and the scene token."""
    x = traj if isinstance(traj, np.ndarray) else pose_vectors(traj, params.config.max_tokens)
    if x.ndim != 2 or x.shape[1] != 7:
        raise ShapeMismatch(f"pose vectors must be (n, 7), got {x.shape}")
    d = np.asarray(descriptor, dtype=float).ravel()
    if d.size != params.config.descriptor_dim:
        raise ShapeMismatch(f"descriptor has {d.size} entries, expected {params.config.descriptor_dim}")
    X, D, mask = pad_batch([x], [d])
    return float(forward_batch(params, X, D, mask)[0])


def loss(ybar, n_gt) -> float:
    """``mean((ybar - 0.1 n_gt)^2)``."""
    ybar = np.asarray(ybar, dtype=float)
    n_gt = np.asarray(n_gt, dtype=float)
    return float(np.mean((ybar - TARGET_SCALE * n_gt) ** 2))


def count_from_output(ybar: float, n_frames: int) -> int:
    """``clamp(round(ybar / 0.1), 2, n_frames)`` with halves rounded up (1 for a single-frame trajectory)."""
    if n_frames < 2:
        return 1
    k = int(np.floor(ybar / TARGET_SCALE + 0.5))
    return min(max(k, 2), int(n_frames))


def predict_count(params: DensityModelParams, traj: Trajectory, descriptor) -> int:
    return count_from_output(forward(params, traj, descriptor), len(traj))
