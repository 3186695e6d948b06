"""AdamW training of the density predictor."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import NonFiniteLoss
from .labels import DensitySample
from .model import TARGET_SCALE, DensityModelParams, backward_batch, forward_batch, pad_batch, pose_vectors


@dataclass
class AdamW:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, flat: np.ndarray, grad: np.ndarray, decay_mask: np.ndarray | None = None) -> None:
        if self.m is None:
            self.m = np.zeros_like(flat)
            self.v = np.zeros_like(flat)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        if self.weight_decay:
            wd = self.lr * self.weight_decay
            flat -= wd * flat if decay_mask is None else wd * flat * decay_mask
        flat -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def decay_mask(params: DensityModelParams) -> np.ndarray:
    """1 for weight matrices, 0 for biases and layer-norm parameters."""
    mask = np.zeros_like(params.flat)
    views = params.views_of(mask)
    for name, shape in params.shapes:
        if len(shape) == 2:
            views[name][...] = 1.0
    return mask


@dataclass
class PreparedSet:
    """Token inputs cached per sample so training does not re-walk trajectories."""

    poses: list[np.ndarray]
    descriptors: np.ndarray
    targets: np.ndarray  # label counts

    def __len__(self) -> int:
        return len(self.poses)

    def batch(self, index):
        X, D, mask = pad_batch([self.poses[i] for i in index], self.descriptors[index])
        return X, D, mask, self.targets[index]


def prepare(dataset: Sequence[DensitySample], max_tokens: int) -> PreparedSet:
    if not len(dataset):
        raise ValueError("empty dataset")
    return PreparedSet(
        [pose_vectors(s.trajectory, max_tokens) for s in dataset],
        np.stack([np.asarray(s.descriptor, dtype=float) for s in dataset]),
        np.array([s.n_gt for s in dataset], dtype=float),
    )


def batch_loss_and_grad(params: DensityModelParams, X, D, mask, n_gt):
    """Mean squared error against ``0.1 * n_gt`` and its flat gradient."""
    ybar, cache = forward_batch(params, X, D, mask, keep_cache=True)
    r = ybar - TARGET_SCALE * n_gt
    value = float(np.mean(r * r))
    return value, backward_batch(params, 2.0 * r / len(r), cache)


def evaluate(params: DensityModelParams, data: PreparedSet, batch_size: int = 64) -> float:
    """Loss over the whole prepared set."""
    total = 0.0
    for s in range(0, len(data), batch_size):
        idx = np.arange(s, min(s + batch_size, len(data)))
        X, D, mask, y = data.batch(idx)
        r = forward_batch(params, X, D, mask) - TARGET_SCALE * y
        total += float((r * r).sum())
    return total / len(data)


@dataclass
class TrainResult:
    params: DensityModelParams
    losses: list[float] = field(default_factory=list)  # minibatch loss per step
    initial_loss: float = float("nan")  # full-set loss before the first step
    final_loss: float = float("nan")

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            for i, v in enumerate(self.losses):
                w.writerow([i, repr(v)])


def train(
    params: DensityModelParams,
    dataset: Sequence[DensitySample] | PreparedSet,
    lr: float = 1e-4,
    batch_size: int = 16,
    steps: int = 2000,
    seed: int = 0,
    weight_decay: float = 0.01,
    callback: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Minibatch AdamW on the squared error of the scaled keyframe count.

    Batches are drawn from a seeded permutation, reshuffled every epoch.  The
    input ``params`` is not modified.
    """
    data = dataset if isinstance(dataset, PreparedSet) else prepare(dataset, params.config.max_tokens)
    if not len(data):
        raise ValueError("empty dataset")
    params = params.copy()
    opt = AdamW(lr=lr, weight_decay=weight_decay)
    dmask = decay_mask(params)
    rng = np.random.default_rng(seed)
    bs = min(batch_size, len(data))
    order = rng.permutation(len(data))
    pos = 0
    result = TrainResult(params, initial_loss=evaluate(params, data))
    for step in range(steps):
        if pos + bs > len(data):
            order = rng.permutation(len(data))
            pos = 0
        idx = np.sort(order[pos : pos + bs])
        pos += bs
        value, grad = batch_loss_and_grad(params, *data.batch(idx))
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise NonFiniteLoss(step, value)
        result.losses.append(value)
        opt.step(params.flat, grad, dmask)
        if callback is not None:
            callback(step, value)
    result.final_loss = evaluate(params, data)
    return result
