"""Keyframe-density predictor and its supervision labels."""

from .labels import DensitySample, LabelJob, build_label_dataset, default_label_jobs, label_keyframes
from .model import (
    TARGET_SCALE,
    DensityConfig,
    DensityModelParams,
    count_from_output,
    embed_pose_tokens,
    forward,
    loss,
    pose_vectors,
    predict_count,
)
from .train import AdamW, TrainResult, train

__all__ = [
    "TARGET_SCALE", "AdamW", "DensityConfig", "DensityModelParams", "DensitySample", "LabelJob", "TrainResult",
    "build_label_dataset", "count_from_output", "default_label_jobs", "embed_pose_tokens", "forward",
    "label_keyframes", "loss", "pose_vectors", "predict_count", "train",
]
