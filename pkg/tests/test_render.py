import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from keyrender.errors import UncoveredFrameIndex
from keyrender.gaussians import GaussianScene
from keyrender.geometry import CameraPose, Intrinsics, Quaternion, Trajectory
from keyrender.render import (
    _depth_order,
    frame_assignment,
    project_gaussians,
    read_ppm,
    read_sidecar,
    render,
    render_video,
    to_uint8,
    write_frame,
    write_ppm,
)

K = Intrinsics(100.0, 100.0, 64.5, 64.5)
RES = (129, 129)
EYE = CameraPose(Quaternion.identity(), (0, 0, 0), K)


def single(sigma, depth, opacity=0.8, color=(1.0, 0.0, 0.0)):
    return GaussianScene([[0, 0, depth]], [[sigma] * 3], [[1, 0, 0, 0]], [opacity], [color])


def radial_r2():
    jj, ii = np.mgrid[0 : RES[1], 0 : RES[0]]
    return (ii + 0.5 - K.cx) ** 2 + (jj + 0.5 - K.cy) ** 2


def random_scene(rng, n, spread=1.0, depth=(2.0, 6.0)):
    means = np.stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n), rng.uniform(*depth, n)], 1)
    q = rng.normal(size=(n, 4))
    return GaussianScene(means, rng.uniform(0.02, 0.4, (n, 3)), q / np.linalg.norm(q, axis=1, keepdims=True),
                         rng.uniform(0.05, 1.0, n), rng.uniform(0, 1, (n, 3)), rng.uniform(0, 1, 3))


def test_empty_scene_is_background():
    f = render(GaussianScene.empty((0.2, 0.3, 0.4)), EYE, (32, 16))
    assert f.color.shape == (16, 32, 3)
    assert np.all(f.color == [0.2, 0.3, 0.4]) and np.all(f.alpha == 0)


def test_single_gaussian_matches_ewa_profile():
    sigma, depth = 0.5, 2.5  # 20 px footprint
    f = render(single(sigma, depth), EYE, RES)
    assert np.unravel_index(f.alpha.argmax(), f.alpha.shape) == (64, 64)
    s_px = K.fx * sigma / depth
    closed = 0.8 * np.exp(-0.5 * radial_r2() / s_px**2)
    assert np.abs(f.alpha - closed).max() < 1e-3
    # with the low-pass term the profile is exact up to the contribution cutoff
    exact = 0.8 * np.exp(-0.5 * radial_r2() / (s_px**2 + 0.3))
    assert np.abs(f.alpha - exact).max() <= 1e-3


def test_two_layer_compositing():
    s = GaussianScene([[0, 0, 2], [0, 0, 3]], [[0.5] * 3] * 2, [[1, 0, 0, 0]] * 2, [0.6, 0.6],
                      [[1, 0, 0], [0, 0, 1]], background=(0, 1, 0))
    f = render(s, EYE, RES)
    np.testing.assert_allclose(f.color[64, 64], [0.6, 0.16, 0.4 * 0.6], atol=1e-6)
    np.testing.assert_allclose(f.alpha[64, 64], 0.84, atol=1e-6)
    np.testing.assert_allclose(f.depth[64, 64], (0.6 * 2 + 0.24 * 3) / 0.84, atol=1e-6)


def test_nearer_opaque_splat_wins():
    s = GaussianScene([[0, 0, 5], [0, 0, 2]], [[1.0] * 3] * 2, [[1, 0, 0, 0]] * 2, [1.0, 1.0],
                      [[0, 0, 1], [1, 0, 0]])
    c = render(s, EYE, RES).color[64, 64]
    assert c[0] >= 0.99 * 0.99 and c[2] < 0.011


def test_insertion_order_is_bit_identical():
    rng = np.random.default_rng(0)
    s = random_scene(rng, 400)
    perm = rng.permutation(len(s))
    a, b = render(s, EYE, RES), render(s.subset(perm), EYE, RES)
    for x, y in zip((a.color, a.alpha, a.depth), (b.color, b.alpha, b.depth)):
        assert np.array_equal(x, y)


def test_equal_depth_ties_broken_by_index():
    s = GaussianScene([[0, 0, 3], [0, 0, 3]], [[0.4] * 3] * 2, [[1, 0, 0, 0]] * 2, [0.7, 0.7],
                      [[1, 0, 0], [0, 0, 1]])
    np.testing.assert_allclose(render(s, EYE, RES).color[64, 64], [0.7, 0, 0.3 * 0.7], atol=1e-9)


def test_zero_opacity_gaussians_are_no_ops():
    rng = np.random.default_rng(1)
    s = random_scene(rng, 300)
    op = s.opacities.copy()
    op[::3] = 0.0
    with_zero = s.replace(opacities=op)
    without = with_zero.subset(np.flatnonzero(op > 0))
    a, b = render(with_zero, EYE, RES), render(without, EYE, RES)
    assert np.array_equal(a.color, b.color) and np.array_equal(a.alpha, b.alpha)


@given(st.integers(0, 10_000), st.integers(1, 60))
def test_alpha_in_unit_interval_and_color_bounded(seed, n):
    rng = np.random.default_rng(seed)
    s = random_scene(rng, n).replace(background=(0.0, 0.0, 0.0))
    f = render(s, EYE, (48, 40))
    assert f.alpha.min() >= 0.0 and f.alpha.max() <= 1.0
    # black background: composited color never exceeds accumulated alpha
    assert np.all(f.color <= f.alpha[..., None] + 1e-12)


def test_projected_covariance_regularized():
    rng = np.random.default_rng(2)
    s = random_scene(rng, 200).replace(scales=np.full((200, 3), 1e-6))
    p = project_gaussians(s, EYE, RES)
    ev = np.linalg.eigvalsh(p.cov2d)
    assert len(p.index) > 0 and ev.min() >= 0.3 - 1e-12
    assert np.all(np.diff(p.depths) >= 0) and np.all(p.depths > 1e-4)


def test_behind_camera_culled():
    assert len(project_gaussians(single(0.3, -2.0), EYE, RES).index) == 0
    f = render(single(0.3, -2.0), EYE, RES)
    assert np.all(f.alpha == 0)


@given(st.lists(st.floats(1e-3, 1e6), min_size=1, max_size=200), st.integers(0, 100))
def test_radix_depth_order_matches_stable_argsort(depths, seed):
    rng = np.random.default_rng(seed)
    d = np.asarray(depths)
    d = d[rng.integers(0, len(d), size=len(d))]  # plenty of ties
    valid = rng.random(len(d)) < 0.8
    order = _depth_order(valid, d)
    idx = np.flatnonzero(valid)
    assert np.array_equal(order, idx[np.argsort(d[idx], kind="stable")])


def test_golden_frame_bytes(tmp_path):
    rng = np.random.default_rng(3)
    s = random_scene(rng, 150)
    write_ppm(tmp_path / "g.ppm", render(s, EYE, (64, 48)).color)
    digest = hashlib.sha256((tmp_path / "g.ppm").read_bytes()).hexdigest()
    assert digest == GOLDEN_DIGEST


GOLDEN_DIGEST = "bb32293aed9e8b93596a099756fecb798efc3341c37b74ea7f184e1d6ba5c6b8"


# -- video -------------------------------------------------------------------------


def test_single_pose_video_equals_render():
    s = single(0.5, 3.0)
    v = render_video(s, Trajectory((EYE,), 30.0), RES)
    assert len(v.frames) == 1 and len(v.frame_seconds) == 1
    assert np.array_equal(v.frames[0].color, render(s, EYE, RES).color)


def test_frame_assignment_boundaries_and_gaps():
    a = frame_assignment(10, [(0, 6), (5, 10)])
    assert list(a) == [0] * 6 + [1] * 4
    with pytest.raises(UncoveredFrameIndex):
        frame_assignment(10, [(0, 4), (5, 10)])


def test_chunked_video_uses_each_chunk():
    red, blue = single(0.5, 3.0, color=(1, 0, 0)), single(0.5, 3.0, color=(0, 0, 1))
    traj = Trajectory((EYE,) * 4, 30.0)
    v = render_video([red, blue], traj, RES, chunk_ranges=[(0, 2), (2, 4)])
    assert [int(np.argmax(f.color[64, 64])) for f in v.frames] == [0, 0, 2, 2]


def test_ppm_and_sidecar_round_trip(tmp_path):
    f = render(random_scene(np.random.default_rng(4), 50), EYE, (40, 30))
    write_frame(tmp_path, 3, f, sidecars=True)
    assert np.array_equal(read_ppm(tmp_path / "frame_00003.ppm"), to_uint8(f.color))
    alpha = read_sidecar(tmp_path / "frame_00003.alpha.f32", (40, 30))
    np.testing.assert_array_equal(alpha, f.alpha.astype(np.float32).astype(float))
