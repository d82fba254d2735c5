"""Transformer building blocks over weight dictionaries."""

from __future__ import annotations

import math

import numpy as np

from mvcc.numerics import Tensor, gelu, layer_norm, linear, matmul, reshape, softmax, swap_last, transpose


def normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.standard_normal(shape) * std


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, c = x.shape
    return transpose(reshape(x, (b, t, heads, c // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, d = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, t, h * d))


def attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    scores = matmul(q, swap_last(k)) * (1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores, mask), v)


def multi_head_attention(x_q, x_kv, w: dict, prefix: str, heads: int, mask=None, weights=None) -> Tensor:
    """Project, attend and merge. ``weights`` may override the q/k/v matrices."""
    weights = weights or {}
    proj = {}
    for name, src in (("q", x_q), ("k", x_kv), ("v", x_kv)):
        W = weights.get(name, w[f"{prefix}.{name}.W"])
        proj[name] = split_heads(linear(src, W, w[f"{prefix}.{name}.b"]), heads)
    out = merge_heads(attend(proj["q"], proj["k"], proj["v"], mask))
    return linear(out, w[f"{prefix}.o.W"], w[f"{prefix}.o.b"])


def feed_forward(x: Tensor, w: dict, prefix: str) -> Tensor:
    h = gelu(linear(x, w[f"{prefix}.fc1.W"], w[f"{prefix}.fc1.b"]))
    return linear(h, w[f"{prefix}.fc2.W"], w[f"{prefix}.fc2.b"])


def norm(x: Tensor, w: dict, prefix: str, eps: float) -> Tensor:
    return layer_norm(x, w[f"{prefix}.g"], w[f"{prefix}.b"], eps)


def init_attention(rng, w: dict, prefix: str, width: int, out_scale: float = 1.0) -> None:
    for name in "qkv":
        w[f"{prefix}.{name}.W"] = normal(rng, (width, width), 1.0 / math.sqrt(width))
        w[f"{prefix}.{name}.b"] = np.zeros(width)
    w[f"{prefix}.o.W"] = normal(rng, (width, width), out_scale / math.sqrt(width))
    w[f"{prefix}.o.b"] = np.zeros(width)


def init_mlp(rng, w: dict, prefix: str, width: int, hidden: int, out_scale: float = 1.0) -> None:
    w[f"{prefix}.fc1.W"] = normal(rng, (width, hidden), 1.0 / math.sqrt(width))
    w[f"{prefix}.fc1.b"] = np.zeros(hidden)
    w[f"{prefix}.fc2.W"] = normal(rng, (hidden, width), out_scale / math.sqrt(hidden))
    w[f"{prefix}.fc2.b"] = np.zeros(width)


def init_norm(w: dict, prefix: str, width: int) -> None:
    w[f"{prefix}.g"] = np.ones(width)
    w[f"{prefix}.b"] = np.zeros(width)
