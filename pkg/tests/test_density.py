import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from keyrender.density import nn
from keyrender.density.labels import DensitySample, label_keyframes, rescale_trajectory
from keyrender.density.model import (
    DensityConfig,
    DensityModelParams,
    count_from_output,
    embed_pose_tokens,
    forward,
    loss,
    pad_batch,
    pose_vectors,
    predict_count,
)
from keyrender.density.train import AdamW, batch_loss_and_grad, decay_mask, train
from keyrender.errors import NonFiniteLoss, ShapeMismatch
from keyrender.geometry import CameraPose, Intrinsics, Quaternion, Trajectory

from conftest import random_poses

TINY = DensityConfig(width=8, heads=2, layers=1, ff_mult=2, descriptor_dim=4, max_tokens=32)


def noisy_params(cfg=TINY, seed=0, scale=0.05):
    p = DensityModelParams.initialize(cfg, seed)
    p.flat[:] += np.random.default_rng(seed + 100).normal(scale=scale, size=p.flat.size)
    return p


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


# -- layers ------------------------------------------------------------------------


def test_layernorm_and_gelu_gradients():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5))
    gamma, beta = rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=(2, 3, 5))

    def f():
        y, _ = nn.layernorm_forward(x, gamma, beta)
        g, _ = nn.gelu_forward(y)
        return float((g * w).sum())

    y, c_ln = nn.layernorm_forward(x, gamma, beta)
    _, c_g = nn.gelu_forward(y)
    dx, dgamma, dbeta = nn.layernorm_backward(nn.gelu_backward(w, c_g), c_ln, gamma)
    for analytic, var in ((dx, x), (dgamma, gamma), (dbeta, beta)):
        np.testing.assert_allclose(analytic, numeric_grad(f, var), rtol=1e-5, atol=1e-8)


def test_attention_gradients_with_mask():
    rng = np.random.default_rng(1)
    B, n, d, H = 2, 4, 6, 3
    x = rng.normal(size=(B, n, d))
    Wqkv, bqkv = rng.normal(size=(d, 3 * d)) / 2, rng.normal(size=3 * d)
    Wo, bo = rng.normal(size=(d, d)) / 2, rng.normal(size=d)
    mask = np.array([[True, True, True, True], [True, True, False, True]])
    w = rng.normal(size=(B, n, d))

    def f():
        return float((nn.attention_forward(x, Wqkv, bqkv, Wo, bo, H, mask)[0] * w).sum())

    _, cache = nn.attention_forward(x, Wqkv, bqkv, Wo, bo, H, mask)
    grads = nn.attention_backward(w, cache, Wqkv, Wo, H)
    for analytic, var in zip(grads, (x, Wqkv, bqkv, Wo, bo)):
        np.testing.assert_allclose(analytic, numeric_grad(f, var), rtol=1e-5, atol=1e-8)


def test_masked_keys_do_not_leak():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 3, 4))
    args = (rng.normal(size=(4, 12)), rng.normal(size=12), rng.normal(size=(4, 4)), rng.normal(size=4), 2)
    mask = np.array([[True, False, True]])
    a = nn.attention_forward(x, *args, mask)[0]
    x[0, 1] += 10.0
    b = nn.attention_forward(x, *args, mask)[0]
    np.testing.assert_allclose(a[0, [0, 2]], b[0, [0, 2]], atol=1e-12)


def test_full_model_gradient():
    p = noisy_params(seed=3)
    rng = np.random.default_rng(3)
    X, D, mask = pad_batch([rng.normal(size=(3, 7)), rng.normal(size=(1, 7))], rng.normal(size=(2, 4)))
    y = np.array([7.0, 3.0])
    _, g = batch_loss_and_grad(p, X, D, mask, y)
    num = numeric_grad(lambda: batch_loss_and_grad(p, X, D, mask, y)[0], p.flat, eps=1e-5)
    rel = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-6)
    assert rel.max() < 1e-3


# -- tokens and forward ------------------------------------------------------------


def test_pose_vector_layout_and_sign():
    K = Intrinsics(50.0, 50.0, 32.0, 32.0)
    q = Quaternion.from_axis_angle([0, 1, 0], 0.5)
    # the same rotation stored with a negative scalar part
    neg = Quaternion.from_array(-q.as_array()) if q.w > 0 else q
    pose = CameraPose(neg, (1.0, -2.0, 3.0), K)
    v = pose_vectors(Trajectory((pose,), 30.0))
    c, s = math.cos(0.25), math.sin(0.25)
    np.testing.assert_allclose(v, [[c, 0.0, s, 0.0, 1.0, -2.0, 3.0]], atol=1e-12)


def test_resampling_keeps_endpoints():
    rng = np.random.default_rng(4)
    traj = Trajectory(tuple(random_poses(rng, 100)), 30.0)
    v = pose_vectors(traj, 32)
    assert v.shape == (32, 7)
    np.testing.assert_array_equal(v[0, 4:], traj[0].center)
    np.testing.assert_array_equal(v[-1, 4:], traj[99].center)
    assert pose_vectors(traj, None).shape == (100, 7)


def test_zero_mlp_tokens_equal_bias():
    p = DensityModelParams(TINY)
    p["cam.b2"][...] = np.arange(8.0)
    traj = Trajectory(tuple(random_poses(np.random.default_rng(5), 6)), 30.0)
    tokens = embed_pose_tokens(p, traj)
    assert tokens.shape == (6, 8)
    assert np.all(tokens == np.arange(8.0))


@given(st.integers(0, 10_000), st.integers(1, 32))
def test_prediction_invariant_to_pose_order(seed, n):
    rng = np.random.default_rng(seed)
    p = noisy_params(seed=seed % 7)
    x = pose_vectors(Trajectory(tuple(random_poses(rng, n)), 30.0))
    d = rng.normal(size=4)
    a = forward(p, x, d)
    b = forward(p, x[rng.permutation(n)], d)
    assert abs(a - b) < 1e-10 * max(1.0, abs(a))


def test_single_pose_forward_is_finite():
    p = noisy_params()
    pose = random_poses(np.random.default_rng(6), 1)[0]
    y = forward(p, Trajectory((pose,), 30.0), np.zeros(4))
    assert np.isfinite(y)
    assert predict_count(p, Trajectory((pose,), 30.0), np.zeros(4)) == 1


def test_descriptor_shape_checked():
    with pytest.raises(ShapeMismatch):
        forward(noisy_params(), np.zeros((3, 7)), np.zeros(5))
    with pytest.raises(ShapeMismatch):
        forward(noisy_params(), np.zeros((3, 6)), np.zeros(4))


# -- loss and counts ---------------------------------------------------------------


def test_loss_examples():
    assert loss(0.0, 10) == pytest.approx(1.0)
    assert loss(1.2, 12) == pytest.approx(0.0, abs=1e-24)
    assert loss([0.0, 2.0], [10, 10]) == pytest.approx(1.0)


def test_count_rounding_examples():
    assert count_from_output(1.25, 100) == 13  # halves round up
    assert count_from_output(1.24, 100) == 12
    assert count_from_output(-3.0, 100) == 2
    assert count_from_output(50.0, 40) == 40


@given(st.floats(-1e6, 1e6), st.integers(1, 5000))
def test_count_always_in_range(ybar, n):
    k = count_from_output(ybar, n)
    if n == 1:
        assert k == 1
    else:
        assert 2 <= k <= n


# -- training ----------------------------------------------------------------------


def _constant_dataset(n_gt, count=8):
    rng = np.random.default_rng(7)
    return [DensitySample(Trajectory(tuple(random_poses(rng, int(rng.integers(12, 30)))), 30.0), rng.normal(size=4), n_gt)
            for _ in range(count)]


def test_constant_label_dataset_converges():
    data = _constant_dataset(12)
    res = train(DensityModelParams.initialize(TINY, 0), data, lr=1e-2, batch_size=4, steps=300, weight_decay=0.0)
    assert res.final_loss < 1e-3 < res.initial_loss
    for s in data:
        assert predict_count(res.params, s.trajectory, s.descriptor) == 12


def test_training_is_deterministic_and_leaves_input_untouched():
    data = _constant_dataset(5, count=6)
    p0 = DensityModelParams.initialize(TINY, 1)
    before = p0.flat.copy()
    a = train(p0, data, steps=20, seed=3)
    b = train(p0, data, steps=20, seed=3)
    assert np.array_equal(p0.flat, before)
    assert np.array_equal(a.params.flat, b.params.flat) and a.losses == b.losses


def test_non_finite_loss_raises():
    data = _constant_dataset(10**308, count=2)
    with pytest.raises(NonFiniteLoss), np.errstate(over="ignore"):
        train(DensityModelParams.initialize(TINY, 0), data, steps=3)


def test_adamw_first_step_and_decay_mask():
    p = DensityModelParams.initialize(TINY, 0)
    mask = decay_mask(p)
    assert np.all(p.views_of(mask)["cam.W1"] == 1) and np.all(p.views_of(mask)["cam.b1"] == 0)
    assert np.all(p.views_of(mask)["block0.ln1.g"] == 0)
    flat = np.array([1.0, 1.0, 0.0])
    opt = AdamW(lr=0.1, weight_decay=0.5)
    opt.step(flat, np.array([2.0, -3.0, 0.0]), np.array([1.0, 0.0, 1.0]))
    # bias-corrected first step moves by lr * sign(grad); decay only where the mask is set
    np.testing.assert_allclose(flat, [1.0 - 0.05 - 0.1, 1.0 + 0.1, 0.0], atol=1e-6)


def test_checkpoint_round_trip_and_shape_errors(tmp_path):
    p = noisy_params()
    path, manifest = p.save(tmp_path / "m.bin")
    q = DensityModelParams.load(path)
    assert q.config == p.config and np.array_equal(q.flat, p.flat)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ShapeMismatch):
        DensityModelParams.load(path)
    with pytest.raises(ShapeMismatch):
        DensityModelParams(TINY, np.zeros(3))


# -- labels ------------------------------------------------------------------------


def test_static_trajectory_needs_one_keyframe(small_room, small_orbit):
    traj = Trajectory((small_orbit[0],) * 30, 30.0)
    assert label_keyframes(small_room, traj, resolution=64).count == 1


def test_rescale_trajectory_keeps_field_of_view(small_orbit):
    t, res = rescale_trajectory(small_orbit, 48)
    assert res == (48, 48)
    K0, K1 = small_orbit[0].intrinsics, t[0].intrinsics
    assert K1.fx / K1.cx == pytest.approx(K0.fx / K0.cx)
