"""Dense layers with hand-written backward passes.

Every ``*_forward`` returns ``(output, cache)`` and the matching ``*_backward``
takes ``(grad_output, cache)`` and returns the input gradient plus parameter
gradients.  Arrays are batched as ``(B, n, d)``.
"""

from __future__ import annotations

import math

import numpy as np

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715
LN_EPS = 1e-5
MASK_VALUE = -1e30


def linear_forward(x, W, b):
    return x @ W + b, x


def linear_backward(dy, x, W):
    din, dout = W.shape
    dW = x.reshape(-1, din).T @ dy.reshape(-1, dout)
    db = dy.reshape(-1, dout).sum(0)
    return dy @ W.T, dW, db


def gelu_forward(x):
    """Tanh approximation of GELU."""
    t = np.tanh(_GELU_K * (x + _GELU_C * x**3))
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    dt = (1.0 - t * t) * _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def layernorm_forward(x, gamma, beta):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def layernorm_backward(dy, cache, gamma):
    xhat, inv = cache
    d = xhat.shape[-1]
    dgamma = (dy * xhat).reshape(-1, d).sum(0)
    dbeta = dy.reshape(-1, d).sum(0)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dgamma, dbeta


def attention_forward(x, Wqkv, bqkv, Wo, bo, heads: int, key_mask):
    """Multi-head softmax self-attention; ``key_mask (B, n)`` is True for real tokens."""
    B, n, d = x.shape
    dh = d // heads
    qkv, _ = linear_forward(x, Wqkv, bqkv)
    qkv = qkv.reshape(B, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)  # (3, B, H, n, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = 1.0 / math.sqrt(dh)
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    s = np.where(key_mask[:, None, None, :], s, MASK_VALUE)
    s = s - s.max(-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(-1, keepdims=True)
    o = (p @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
    out, _ = linear_forward(o, Wo, bo)
    return out, (x, q, k, v, p, o, scale)


def attention_backward(dout, cache, Wqkv, Wo, heads: int):
    x, q, k, v, p, o, scale = cache
    B, n, d = x.shape
    dh = d // heads
    do, dWo, dbo = linear_backward(dout, o, Wo)
    do = do.reshape(B, n, heads, dh).transpose(0, 2, 1, 3)
    dp = do @ v.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ do
    ds = p * (dp - (dp * p).sum(-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, n, 3 * d)
    dx, dWqkv, dbqkv = linear_backward(dqkv, x, Wqkv)
    return dx, dWqkv, dbqkv, dWo, dbo
