"""Image-quality and timing metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch

INF_SENTINEL = "inf"


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """``10 log10(1 / MSE)`` over [0, 1] channels; ``math.inf`` for identical images."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def format_db(value: float) -> str:
    return INF_SENTINEL if math.isinf(value) else repr(float(value))


def hole_fraction(frame, alpha_threshold: float = 0.5) -> float:
    """Fraction of pixels whose accumulated alpha is below ``alpha_threshold``."""
    alpha = frame.alpha if hasattr(frame, "alpha") else np.asarray(frame)
    return float(np.count_nonzero(alpha < alpha_threshold)) / alpha.size


STAGES = ("density-predict", "keyframe-provide", "reconstruct", "align", "render")


@dataclass
class MetricsRecord:
    stage_seconds: dict[str, float] = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    psnr: list[float] | None = None
    holes: list[float] = field(default_factory=list)
    keyframe_count: int = 0
    n_frames: int = 0

    @property
    def total_seconds(self) -> float:
        return float(sum(self.stage_seconds.values()))

    @property
    def generation_fps(self) -> float:
        t = self.total_seconds
        return self.n_frames / t if t > 0 else math.inf

    @property
    def render_fps(self) -> float:
        t = self.stage_seconds.get("render", 0.0)
        return self.n_frames / t if t > 0 else math.inf

    @property
    def mean_psnr(self) -> float | None:
        if not self.psnr:
            return None
        return float(np.mean(self.psnr))

    @property
    def mean_hole(self) -> float:
        return float(np.mean(self.holes)) if self.holes else 0.0

    def write_stage_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "seconds"])
            for s in STAGES:
                w.writerow([s, repr(self.stage_seconds[s])])
            w.writerow(["total", repr(self.total_seconds)])

    def write_frame_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "psnr", "hole"])
            for i, h in enumerate(self.holes):
                p = "" if self.psnr is None else format_db(self.psnr[i])
                w.writerow([i, p, repr(h)])

    def summary(self) -> dict:
        return {
            "keyframes": self.keyframe_count,
            "frames": self.n_frames,
            "keyframe_fraction": self.keyframe_count / self.n_frames if self.n_frames else 0.0,
            "mean_psnr": None if self.mean_psnr is None else format_db(self.mean_psnr),
            "mean_hole": self.mean_hole,
            "render_fps": self.render_fps,
            "generation_fps": self.generation_fps,
            "stage_seconds": dict(self.stage_seconds),
            "total_seconds": self.total_seconds,
        }
