import csv
import json
import math

import numpy as np
import pytest

from keyrender.errors import ConfigError, DimensionMismatch, MissingManifest, StageFailure
from keyrender.geometry import Trajectory, read_pose_file, write_pose_file
from keyrender.metrics import hole_fraction, psnr
from keyrender.pipeline import (
    PipelineConfig,
    assign_to_original,
    bench,
    evaluate_frames,
    rerender_trajectory,
    run_pipeline,
)
from keyrender.render import RenderedFrame, read_ppm

SMALL = dict(budget=5000, duration_s=2.0, fps=10.0, resolution=(48, 48), keyframe_count=4)


def small_cfg(tmp_path, name="run", **kw):
    return PipelineConfig.from_dict(dict(SMALL, output_dir=str(tmp_path / name), **kw))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    return run_pipeline(small_cfg(d, sidecars=True))


# -- metrics -----------------------------------------------------------------------


def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == math.inf
    assert psnr(a, np.full_like(a, 0.5)) == pytest.approx(10 * math.log10(4))  # 6.02 dB
    rng = np.random.default_rng(0)
    noisy = 0.5 + rng.normal(scale=0.01, size=(256, 256, 3))
    assert psnr(np.full_like(noisy, 0.5), noisy) == pytest.approx(40.0, abs=0.1)
    with pytest.raises(DimensionMismatch):
        psnr(a, np.zeros((4, 5, 3)))


def test_hole_fraction_examples():
    alpha = np.array([[0.0, 0.49], [0.5, 1.0]])
    assert hole_fraction(alpha) == 0.5
    frame = RenderedFrame(np.zeros((2, 2, 3)), alpha, np.zeros((2, 2)))
    assert hole_fraction(frame, 0.6) == 0.75
    assert hole_fraction(np.ones((3, 3))) == 0.0


# -- configuration -----------------------------------------------------------------


def test_config_flags_win(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"fps": 12, "tau": 0.5, "resolution": [32, 24]}))
    cfg = PipelineConfig.load(p, {"tau": 0.8, "keyframe_count": None})
    assert cfg.fps == 12 and cfg.tau == 0.8 and cfg.resolution == (32, 24)


@pytest.mark.parametrize("bad", [
    {"tau": 3.0}, {"recipe": "castle"}, {"resolution": [0, 10]}, {"count_source": "fixed"},
    {"density_checkpoint": "/no/such/file"}, {"corruption": "blur:1"}, {"windoww": 3}, {"window": 1},
])
def test_config_errors(tmp_path, bad):
    with pytest.raises(ConfigError):
        PipelineConfig.load(None, bad)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        PipelineConfig.load(tmp_path / "bad.json")


def test_count_source_resolution():
    assert PipelineConfig(keyframe_count=5).resolved_count_source() == "fixed"
    assert PipelineConfig().resolved_count_source() == "label"


# -- runs --------------------------------------------------------------------------


def test_run_writes_artifacts(small_run):
    out = small_run.output_dir
    for name in ("config.json", "trajectory.txt", "keyframes.json", "stages.csv", "frames.csv", "summary.json",
                 "recon/manifest.json", "recon/chunk_000.splat", "frames/frame_00019.ppm",
                 "frames/frame_00000.alpha.f32", "keyframes/poses.txt"):
        assert (out / name).is_file(), name
    summary = json.loads((out / "summary.json").read_text())
    assert summary["keyframes"] == 4 and summary["frames"] == 20 and summary["count_source"] == "fixed"
    assert small_run.metrics.mean_psnr > 10  # four keyframes around a whole orbit
    with open(out / "stages.csv") as fh:
        rows = {r["stage"]: float(r["seconds"]) for r in csv.DictReader(fh)}
    assert rows["total"] == pytest.approx(sum(v for k, v in rows.items() if k != "total"))


def test_runs_are_deterministic(tmp_path, small_run):
    again = run_pipeline(small_cfg(tmp_path, sidecars=True))
    a, b = small_run.output_dir, again.output_dir
    assert (a / "frames.csv").read_text() == (b / "frames.csv").read_text()
    for i in (0, 7, 19):
        assert (a / f"frames/frame_{i:05d}.ppm").read_bytes() == (b / f"frames/frame_{i:05d}.ppm").read_bytes()


def test_stage_failure_names_the_stage(tmp_path):
    with pytest.raises(StageFailure) as info:
        run_pipeline(small_cfg(tmp_path, keyframe_count=50))
    assert info.value.stage == "density-predict"


def test_fewer_keyframes_leave_more_holes(tmp_path):
    base = dict(SMALL, duration_s=6.0, fps=5.0, evaluate=False, write_frames=False)
    few = run_pipeline(PipelineConfig.from_dict(dict(base, keyframe_count=2, output_dir=str(tmp_path / "a"))))
    many = run_pipeline(PipelineConfig.from_dict(dict(base, keyframe_count=16, output_dir=str(tmp_path / "b"))))
    assert few.metrics.mean_hole > many.metrics.mean_hole


def test_keyframes_from_files_match_oracle(tmp_path, small_run):
    cfg = small_cfg(tmp_path, keyframe_source="files", keyframe_dir=str(small_run.output_dir / "keyframes"))
    res = run_pipeline(cfg)
    for i in (0, 10):
        name = f"frames/frame_{i:05d}.ppm"
        a = read_ppm(res.output_dir / name).astype(int)
        b = read_ppm(small_run.output_dir / name).astype(int)
        # keyframe images go through 8-bit files, depths through float32 sidecars
        assert np.abs(a - b).mean() < 2.0


# -- rerendering -------------------------------------------------------------------


def test_rerender_same_trajectory_is_bit_identical(tmp_path, small_run):
    out = small_run.output_dir
    rr = rerender_trajectory(out / "recon", out / "trajectory.txt", tmp_path / "rr")
    assert len(rr.frames) == 20
    for i in range(20):
        name = f"frame_{i:05d}.ppm"
        assert (tmp_path / "rr" / name).read_bytes() == (out / "frames" / name).read_bytes()
    rec = evaluate_frames(tmp_path / "rr", out / "frames", tmp_path / "eval.csv")
    assert all(math.isinf(v) for v in rec.psnr)
    assert "inf" in (tmp_path / "eval.csv").read_text()


def test_rerender_reversed_trajectory(tmp_path, small_run):
    out = small_run.output_dir
    traj = read_pose_file(out / "trajectory.txt")
    rev = Trajectory(traj.poses[::-1], traj.fps)
    write_pose_file(tmp_path / "rev.txt", rev)
    fwd = rerender_trajectory(out / "recon", traj)
    back = rerender_trajectory(out / "recon", tmp_path / "rev.txt")
    for a, b in zip(fwd.frames, back.frames[::-1]):
        assert np.array_equal(a.color, b.color)


def test_rerender_missing_manifest(tmp_path):
    with pytest.raises(MissingManifest):
        rerender_trajectory(tmp_path / "nothing", tmp_path / "poses.txt")


def test_assignment_follows_nearest_original_frame(small_run):
    traj = read_pose_file(small_run.output_dir / "trajectory.txt")
    original = np.array([0] * 10 + [1] * 10)
    assert np.array_equal(assign_to_original(traj, traj, original), original)
    # a trajectory sitting on frame 15 for every pose goes to chunk 1
    parked = Trajectory((traj[15],) * 5, traj.fps)
    assert list(assign_to_original(parked, traj, original)) == [1] * 5


# -- benchmarking ------------------------------------------------------------------


def test_bench_single_repetition(tmp_path):
    rep = bench(small_cfg(tmp_path, "bench"), repetitions=1)
    assert len(rep.runs) == 1 and rep.n_frames == 20 and rep.keyframe_count == 4
    assert rep.generation_fps > 0 and rep.keyframe_fraction == 0.2
    assert not (tmp_path / "bench" / "rep0").exists()
    with open(tmp_path / "bench" / "bench.csv") as fh:
        rows = {r["stage"]: r for r in csv.DictReader(fh)}
    stages = ("density-predict", "keyframe-provide", "reconstruct", "align", "render")
    total = sum(float(rows[s]["median_seconds"]) for s in stages)
    assert float(rows["total"]["median_seconds"]) == pytest.approx(total)
    with pytest.raises(ConfigError):
        bench(small_cfg(tmp_path, "bench2"), repetitions=0)
