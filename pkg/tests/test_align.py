import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from keyrender.align import (
    ChunkReconstruction,
    align_chunks,
    canonical_gauge,
    fit_similarity,
    load_aligned,
    make_chunk_plan,
    reconstruct,
    reconstruct_chunk,
)
from keyrender.errors import CountMismatch, DegenerateConfiguration, MissingManifest, NoValidDepth
from keyrender.gaussians import GaussianScene
from keyrender.geometry import (
    CameraPose,
    Intrinsics,
    Quaternion,
    SimilarityTransform,
    Trajectory,
    compose,
    rotation_angle,
)
from keyrender.keyframes import uniform_keyframe_indices
from keyrender.metrics import psnr
from keyrender.render import render
from keyrender.synth import generate_scene, generate_trajectory, oracle_keyframes

from conftest import random_poses, random_rotation

K64 = Intrinsics.from_fov(64, 64, 60.0)
KNOWN = SimilarityTransform(2.0, Quaternion.from_axis_angle([0, 1, 0], math.radians(30)), (1.0, 2.0, 3.0))


def _down_camera(x=0.0, y=0.0, height=3.0):
    R = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    return CameraPose(Quaternion.from_matrix(R), (x, y, height), K64)


@pytest.fixture(scope="module")
def plane_keyframes():
    plane = generate_scene("checker-plane", 0, budget=20_000)
    return plane, oracle_keyframes(plane, [_down_camera(), _down_camera(0.4, -0.3, 2.5)], (64, 64))


# -- reconstruction ----------------------------------------------------------------


def test_plane_reconstructs_onto_plane(plane_keyframes):
    _, kfs = plane_keyframes
    voxel = 0.02
    rec = reconstruct(kfs, voxel_size=voxel)
    assert len(rec) > 500
    assert np.abs(rec.means[:, 2]).max() <= voxel
    assert np.all(rec.opacities == 0.95)
    assert np.all(rec.scales >= voxel / 2)


def test_duplicate_keyframes_are_idempotent(plane_keyframes):
    _, kfs = plane_keyframes
    a = reconstruct(kfs)
    b = reconstruct(list(kfs) * 2)
    for name in ("means", "scales", "colors"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_keyframe_order_is_irrelevant(small_room, small_orbit):
    kfs = oracle_keyframes(small_room, [small_orbit[i] for i in (0, 13, 27, 39)], (64, 64))
    a = reconstruct(kfs)
    b = reconstruct(kfs[::-1])
    for name in ("means", "scales", "colors"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_no_valid_depth(plane_keyframes):
    plane, _ = plane_keyframes
    up = CameraPose(Quaternion.identity(), (0.0, 0.0, 3.0), K64)
    with pytest.raises(NoValidDepth):
        reconstruct(oracle_keyframes(plane, [up], (64, 64)))
    with pytest.raises(NoValidDepth):
        reconstruct([])


def test_held_out_views_near_keyframes(small_room):
    res = (96, 96)
    traj = generate_trajectory("orbit", 20.0, 3.0, 0, small_room.bounds, resolution=res)
    idx = uniform_keyframe_indices(len(traj), 16)
    rec = reconstruct(oracle_keyframes(small_room, [traj[i] for i in idx], res))
    held = [(a + b) // 2 for a, b in zip(idx, idx[1:])]
    scores = [psnr(render(rec, traj[i], res).color, render(small_room, traj[i], res).color) for i in held]
    # measured: mean 26.2 dB, worst 25.4 dB
    assert np.mean(scores) >= 25.0


# -- similarity fitting ------------------------------------------------------------


def _poses(seed, n):
    return random_poses(np.random.default_rng(seed), n, intrinsics=K64)


def test_fit_identity():
    src = _poses(0, 5)
    S = fit_similarity(src, src)
    np.testing.assert_allclose(S.matrix(), np.eye(4), atol=1e-12)


def test_fit_known_transform():
    src = _poses(1, 6)
    S, rms = fit_similarity(src, [compose(KNOWN, p) for p in src], return_residual=True)
    assert abs(S.scale - 2.0) < 1e-9
    assert rotation_angle(S.rotation, KNOWN.rotation) < 1e-9
    np.testing.assert_allclose(S.translation, (1.0, 2.0, 3.0), atol=1e-9)
    assert rms < 1e-9


@given(st.integers(0, 10_000), st.integers(3, 10))
def test_fit_closes_the_loop(seed, n):
    rng = np.random.default_rng(seed)
    T = SimilarityTransform(float(rng.uniform(0.2, 5.0)), random_rotation(rng), rng.normal(scale=3, size=3))
    src = random_poses(rng, n, intrinsics=K64)
    dst = [compose(T, p) for p in src]
    S = fit_similarity(src, dst)
    for p, q in zip(src, dst):
        mapped = compose(S, p)
        assert np.linalg.norm(mapped.center - q.center) < 1e-8 * T.scale
        assert rotation_angle(mapped.rotation, q.rotation) < 1e-7


def test_fit_degenerate_inputs():
    src = _poses(2, 2)
    dst = [compose(KNOWN, p) for p in src]
    with pytest.raises(DegenerateConfiguration):
        fit_similarity(src, dst)  # two poses need the fallback
    line = [CameraPose(p.rotation, (float(i), 2.0 * i, 0.0), K64) for i, p in enumerate(_poses(3, 4))]
    with pytest.raises(DegenerateConfiguration):
        fit_similarity(line, [compose(KNOWN, p) for p in line])
    same = [CameraPose(p.rotation, (1.0, 1.0, 1.0), K64) for p in _poses(4, 4)]
    with pytest.raises(DegenerateConfiguration):
        fit_similarity(same, same, allow_fallback=True)
    with pytest.raises(CountMismatch):
        fit_similarity(_poses(5, 3), _poses(5, 4))


def test_fallback_recovers_transform_from_collinear_centers():
    line = [CameraPose(p.rotation, (float(i), 2.0 * i, 0.5), K64) for i, p in enumerate(_poses(6, 3))]
    S = fit_similarity(line, [compose(KNOWN, p) for p in line], allow_fallback=True)
    np.testing.assert_allclose(S.matrix(), KNOWN.matrix(), atol=1e-9)
    pair = line[:2]
    S2 = fit_similarity(pair, [compose(KNOWN, p) for p in pair], allow_fallback=True)
    np.testing.assert_allclose(S2.matrix(), KNOWN.matrix(), atol=1e-9)


def test_canonical_gauge():
    poses = _poses(7, 5)
    G = canonical_gauge(poses)
    mapped = [compose(G, p) for p in poses]
    np.testing.assert_allclose(mapped[0].center, 0.0, atol=1e-12)
    assert rotation_angle(mapped[0].rotation, Quaternion.identity()) < 1e-12
    d = [np.linalg.norm(p.center) for p in mapped[1:]]
    assert np.mean(d) == pytest.approx(1.0)


# -- chunk plans -------------------------------------------------------------------


def _static(n, fps=30.0):
    return Trajectory((_down_camera(),) * n, fps)


def test_twenty_seconds_make_two_chunks():
    traj = _static(600)
    idx = uniform_keyframe_indices(600, 16)  # spacing 40 frames, keyframe at 280 is the last one before 10 s
    plan = make_chunk_plan(idx, traj, 10.0)
    assert len(plan) == 2
    assert plan.shared == [plan.keyframes[0][-1]] and plan.keyframes[1][0] == plan.shared[0]
    assert idx[plan.shared[0]] == 280
    assert plan.frame_ranges == [(0, 281), (281, 600)]


def test_short_trajectory_is_one_chunk():
    plan = make_chunk_plan(uniform_keyframe_indices(240, 8), _static(240), 10.0)
    assert len(plan) == 1 and plan.shared == [] and plan.frame_ranges == [(0, 240)]


def test_boundary_keyframe_closes_earlier_chunk():
    plan = make_chunk_plan([0, 150, 300, 450, 599], _static(600), 10.0)
    assert plan.keyframes == [[0, 1, 2], [2, 3, 4]]


@given(st.integers(2, 900), st.data(), st.floats(0.5, 12.0))
def test_chunk_ranges_partition_frames(n, data, duration):
    k = data.draw(st.integers(2, min(n, 60)))
    idx = uniform_keyframe_indices(n, k)
    plan = make_chunk_plan(idx, _static(n), duration)
    ends = [0] + [e for _, e in plan.frame_ranges]
    assert [s for s, _ in plan.frame_ranges] == ends[:-1] and ends[-1] == n
    assert all(e > s for s, e in plan.frame_ranges)
    # every keyframe belongs to some chunk, neighbours share exactly one
    assert sorted({m for c in plan.keyframes for m in c}) == list(range(k))
    for j in range(1, len(plan)):
        assert set(plan.keyframes[j - 1]) & set(plan.keyframes[j]) == {plan.shared[j - 1]}
    if len(plan) > 1:
        assert all(len(c) >= 2 for c in plan.keyframes)


# -- alignment ---------------------------------------------------------------------


def _two_chunk_setup(seed=8, n=600):
    rng = np.random.default_rng(seed)
    traj = Trajectory(tuple(random_poses(rng, n, intrinsics=K64)), 30.0)
    idx = uniform_keyframe_indices(n, 16)
    return traj, idx, make_chunk_plan(idx, traj, 10.0)


def test_prealigned_chunks_get_identity():
    traj, idx, plan = _two_chunk_setup()
    chunks = [ChunkReconstruction(GaussianScene.empty(), [traj[idx[k]] for k in c]) for c in plan.keyframes]
    rec = align_chunks(plan, chunks, traj)
    for S in rec.transforms + rec.corrections:
        np.testing.assert_allclose(S.matrix(), np.eye(4), atol=1e-9)
    assert max(max(r) for r in rec.residuals) < 1e-9


def test_rotated_scaled_chunk_is_stitched():
    traj, idx, plan = _two_chunk_setup()
    G = SimilarityTransform(1.3, Quaternion.from_axis_angle([0, 0, 1], math.radians(15)), (0.5, -1.0, 2.0))
    rng = np.random.default_rng(9)
    second = [compose(G, traj[idx[k]]) for k in plan.keyframes[1]]
    # small independent pose noise so the fit is not exact
    second = [CameraPose(p.rotation, p.center + rng.normal(scale=1e-3, size=3), p.intrinsics) for p in second]
    chunks = [ChunkReconstruction(GaussianScene.empty(), [traj[idx[k]] for k in plan.keyframes[0]]),
              ChunkReconstruction(GaussianScene.empty(), second)]
    rec = align_chunks(plan, chunks, traj)
    S = rec.transforms[1]
    assert abs(S.scale - 1.3) < 1e-2 and rotation_angle(S.rotation, G.rotation) < 1e-2
    shared = compose(S, traj[idx[plan.shared[0]]])
    np.testing.assert_allclose(shared.center, second[0].center, atol=1e-9)
    assert rotation_angle(shared.rotation, second[0].rotation) < 1e-9
    assert rec.boundary_mismatch[0] < 1e-9


def test_align_count_mismatch():
    traj, idx, plan = _two_chunk_setup()
    with pytest.raises(CountMismatch):
        align_chunks(plan, [], traj)


def test_gauge_chunk_and_save_load(tmp_path, small_room, small_orbit):
    traj = small_orbit
    idx = uniform_keyframe_indices(len(traj), 6)
    plan = make_chunk_plan(idx, traj, 2.0)
    kfs = oracle_keyframes(small_room, [traj[i] for i in idx], (64, 64))
    chunks = [reconstruct_chunk([kfs[k] for k in c]) for c in plan.keyframes]
    assert rotation_angle(chunks[0].poses[0].rotation, Quaternion.identity()) < 1e-12
    rec = align_chunks(plan, chunks, traj)
    manifest = rec.save(tmp_path / "recon", extra={"note": 1})
    back, raw = load_aligned(manifest)
    assert raw["note"] == 1 and back.plan.to_dict() == plan.to_dict()
    assert back.transforms == rec.transforms
    for a, b in zip(back.scenes, rec.scenes):
        assert np.array_equal(a.means, b.as_float32().means)
    # a reloaded reconstruction renders like the float32 copy of the original
    f = render(back.scenes[0], compose(back.transforms[0], traj[0]), (64, 64))
    g = render(rec.scenes[0].as_float32(), compose(rec.transforms[0], traj[0]), (64, 64))
    assert np.array_equal(f.color, g.color)


def test_missing_manifest(tmp_path, small_room, small_orbit):
    with pytest.raises(MissingManifest):
        load_aligned(tmp_path / "nowhere")
    traj = small_orbit
    idx = uniform_keyframe_indices(len(traj), 4)
    plan = make_chunk_plan(idx, traj, 10.0)
    kfs = oracle_keyframes(small_room, [traj[i] for i in idx], (32, 32))
    rec = align_chunks(plan, [reconstruct_chunk(kfs)], traj)
    rec.save(tmp_path / "r")
    (tmp_path / "r" / "chunk_000.splat").unlink()
    with pytest.raises(MissingManifest):
        load_aligned(tmp_path / "r")
