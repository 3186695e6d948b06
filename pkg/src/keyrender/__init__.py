"""Sparse-keyframe video rendering: pick keyframes, reconstruct gaussians, align chunks, render every frame."""

from .align import align_chunks, fit_similarity, make_chunk_plan, reconstruct, reconstruct_chunk
from .gaussians import GaussianScene, read_splat, write_splat
from .geometry import CameraPose, Intrinsics, Quaternion, SimilarityTransform, Trajectory, read_pose_file, write_pose_file
from .keyframes import plan_generation_batches, select_keyframes, uniform_keyframe_indices
from .metrics import hole_fraction, psnr
from .pipeline import PipelineConfig, bench, rerender_trajectory, run_pipeline
from .render import render, render_video
from .synth import generate_scene, generate_trajectory, oracle_keyframes

__version__ = "0.1.0"
