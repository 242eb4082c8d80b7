"""Attention mechanisms: vanilla softmax attention, kernelized linear
attention in both evaluation orders, feature maps, window partitioning,
and the multi-head wrapper.

Linear attention replaces the exponential similarity with a decomposable
kernel phi(q) . phi(k), which allows the key-value product to be formed
first: the quadratic (N x N) attention matrix never needs to exist and the
cost drops from O(N^2 d) to O(N d^2). The denominator is clamped from below
(clamp_floor) and the key-value accumulators are divided by a learnable
scale to keep intermediate magnitudes bounded; both evaluation orders clamp
consistently, so they agree to rounding whether or not the clamp is active.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    LEAKY_SLOPE,
    DegenerateInputError,
    ShapeError,
    as_f64,
    softmax_rows,
)

FEATURE_MAPS = ("relu", "l1_norm", "leaky_relu", "none")


@dataclass(frozen=True)
class AttentionConfig:
    """Hyper-parameters of one attention layer.

    clamp_floor is the lower bound applied to the linear-attention
    denominator; scale_s divides the key-value accumulators (a learnable
    per-layer scalar, initialized to sqrt(channels) by the model builder).
    """

    num_heads: int = 1
    head_dim: int = 32
    feature_map: str = "relu"
    clamp_floor: float = 100.0
    scale_s: float = 1.0
    qk_scale: float | None = None  # None -> 1/sqrt(head_dim)

    def __post_init__(self):
        if self.num_heads < 1 or self.head_dim < 1:
            raise ValueError("num_heads and head_dim must be positive")
        if self.feature_map not in FEATURE_MAPS:
            raise ValueError(f"unknown feature map {self.feature_map!r}")
        if not self.clamp_floor >= 1e-6:
            raise ValueError("clamp_floor must be >= 1e-6")
        if not self.scale_s > 0.0:
            raise ValueError("scale_s must be positive")
        if self.qk_scale is None:
            object.__setattr__(self, "qk_scale", 1.0 / math.sqrt(self.head_dim))

    @property
    def channels(self) -> int:
        return self.num_heads * self.head_dim


@dataclass(frozen=True)
class WindowLayout:
    """A (feature_h x feature_w) token grid tiled by non-overlapping
    square windows; the window size must divide both extents (pad first
    if it does not)."""

    feature_h: int
    feature_w: int
    window: int

    def __post_init__(self):
        if min(self.feature_h, self.feature_w, self.window) < 1:
            raise ValueError("layout extents must be positive")
        if self.feature_h % self.window or self.feature_w % self.window:
            raise ShapeError(
                f"window {self.window} does not divide {self.feature_h}x{self.feature_w}")

    @property
    def num_windows(self) -> int:
        return (self.feature_h // self.window) * (self.feature_w // self.window)

    @property
    def tokens(self) -> int:
        return self.feature_h * self.feature_w


def feature_map(x, kind: str) -> np.ndarray:
    """Query/key transform applied before the kernel dot product.

    relu guarantees non-negative attention scores; l1_norm divides each row
    by its L1 norm (sign-preserving); leaky_relu keeps small negatives.
    """
    x = as_f64(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        return np.where(x >= 0.0, x, LEAKY_SLOPE * x)
    if kind == "none":
        return x
    if kind == "l1_norm":
        norms = np.abs(x).sum(axis=-1, keepdims=True)
        if np.any(norms == 0.0):
            raise DegenerateInputError("l1_norm feature map hit an all-zero row")
        return x / norms
    raise ValueError(f"unknown feature map {kind!r}")


def feature_map_grad(x, kind: str, grad_out: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of feature_map at x."""
    x = as_f64(x)
    if kind == "relu":
        return grad_out * (x > 0.0)
    if kind == "leaky_relu":
        return grad_out * np.where(x >= 0.0, 1.0, LEAKY_SLOPE)
    if kind == "none":
        return grad_out.copy()
    if kind == "l1_norm":
        norms = np.abs(x).sum(axis=-1, keepdims=True)
        y = x / norms
        inner = (grad_out * y).sum(axis=-1, keepdims=True)
        return (grad_out - np.sign(x) * inner) / norms
    raise ValueError(f"unknown feature map {kind!r}")


def softmax_attention(q, k, v, qk_scale: float | None = None) -> np.ndarray:
    """O = softmax(q k^T * qk_scale) v, batched over leading axes."""
    q, k, v = as_f64(q), as_f64(k), as_f64(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    if qk_scale is None:
        qk_scale = 1.0 / math.sqrt(q.shape[-1])
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * qk_scale
    return np.matmul(softmax_rows(scores), v)


def _direct_parts(q, k, v, cfg: AttentionConfig):
    """Materialized-order linear attention; returns intermediates.

    A[i,j] = phi(q_i) . phi(k_j); O_i = sum_j A[i,j] v_j / max(sum_k A[i,k],
    clamp_floor). Returns (A, raw row sums, clamped denominators, O).
    """
    fq = feature_map(q, cfg.feature_map)
    fk = feature_map(k, cfg.feature_map)
    a = fq @ fk.T
    row_sums = a.sum(axis=1)
    den = np.maximum(row_sums, cfg.clamp_floor)
    out = (a @ v) / den[:, None]
    return a, row_sums, den, out


def linear_attention_direct(q, k, v, cfg: AttentionConfig) -> np.ndarray:
    """Single-head linear attention evaluated through the full N x N matrix.

    Quadratic in N; exists as the mathematical reference for the factored
    order and for attention-map analysis.
    """
    q, k, v = as_f64(q), as_f64(k), as_f64(v)
    _check_single_head(q, k, v)
    return _direct_parts(q, k, v, cfg)[3]


def _factored_parts(q, k, v, cfg: AttentionConfig):
    """Key-value-first linear attention, batched over leading axes.

    M = phi(k)^T v / s, z = phi(k)^T 1 / s, and per query
    O_i = phi(q_i) M / max(phi(q_i) . z, clamp_floor / s). Dividing both
    accumulators by s makes the output identical to the direct order.
    """
    fq = feature_map(q, cfg.feature_map)
    fk = feature_map(k, cfg.feature_map)
    s = cfg.scale_s
    kv = np.matmul(np.swapaxes(fk, -1, -2), v) / s
    z = fk.sum(axis=-2) / s
    num = np.matmul(fq, kv)
    raw = np.matmul(fq, z[..., None])[..., 0]
    floor = cfg.clamp_floor / s
    den = np.maximum(raw, floor)
    out = num / den[..., None]
    return fq, fk, kv, z, num, raw, den, out


def linear_attention_factored(q, k, v, cfg: AttentionConfig) -> np.ndarray:
    """Linear attention in the O(N d^2) evaluation order.

    Batched over leading axes (e.g. a heads axis); the last two axes are
    (tokens, head_dim).
    """
    q, k, v = as_f64(q), as_f64(k), as_f64(v)
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    return _factored_parts(q, k, v, cfg)[7]


def order_macs(n: int, d: int, order: str) -> int:
    """Multiply-accumulate count of one single-head linear attention pass:
    the direct order materializes the N x N matrix (2 N^2 d), the factored
    order forms the d x d key-value product first (2 N d^2)."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    if order == "direct":
        return 2 * n * n * d
    if order == "factored":
        return 2 * n * d * d
    raise ValueError(f"unknown order {order!r}")


def select_attention_order(n: int, d: int) -> str:
    """Pick the cheaper evaluation order by MAC count; ties go to factored."""
    if order_macs(n, d, "factored") <= order_macs(n, d, "direct"):
        return "factored"
    return "direct"


def window_partition(x, layout: WindowLayout) -> np.ndarray:
    """(N, C) tokens -> (num_windows, window^2, C), windows in row-major
    order and tokens in row-major order within each window."""
    x = as_f64(x)
    if x.ndim != 2 or x.shape[0] != layout.tokens:
        raise ShapeError(f"token count {x.shape} != layout {layout}")
    w = layout.window
    gh, gw = layout.feature_h // w, layout.feature_w // w
    c = x.shape[1]
    tiles = x.reshape(gh, w, gw, w, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(tiles.reshape(gh * gw, w * w, c))


def window_reverse(windows, layout: WindowLayout) -> np.ndarray:
    """Inverse of window_partition."""
    windows = as_f64(windows)
    w = layout.window
    gh, gw = layout.feature_h // w, layout.feature_w // w
    if windows.shape[:2] != (layout.num_windows, w * w):
        raise ShapeError(f"window block {windows.shape} != layout {layout}")
    c = windows.shape[2]
    tiles = windows.reshape(gh, gw, w, w, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(tiles.reshape(layout.tokens, c))


def pad_to_windows(x, hw: tuple[int, int], window: int):
    """Zero-pad a token grid on the right/bottom until the window divides
    both extents. Returns (padded tokens, padded WindowLayout)."""
    x = as_f64(x)
    h, w = hw
    if x.shape[0] != h * w:
        raise ShapeError(f"token count {x.shape[0]} != {h}x{w}")
    ph = (window - h % window) % window
    pw = (window - w % window) % window
    if ph == 0 and pw == 0:
        return x, WindowLayout(h, w, window)
    grid = x.reshape(h, w, -1)
    grid = np.pad(grid, ((0, ph), (0, pw), (0, 0)))
    return grid.reshape((h + ph) * (w + pw), -1), WindowLayout(h + ph, w + pw, window)


def crop_from_windows(x, padded_hw: tuple[int, int], hw: tuple[int, int]) -> np.ndarray:
    """Drop the right/bottom zero padding added by pad_to_windows."""
    ph, pw = padded_hw
    h, w = hw
    if ph == h and pw == w:
        return x
    grid = x.reshape(ph, pw, -1)
    return np.ascontiguousarray(grid[:h, :w].reshape(h * w, -1))


def multi_head(op, q, k, v, cfg: AttentionConfig, w_out=None, b_out=None) -> np.ndarray:
    """Split channels into heads, apply `op(q_h, k_h, v_h)` per head,
    concatenate, and optionally apply an output projection."""
    q, k, v = as_f64(q), as_f64(k), as_f64(v)
    n, c = q.shape
    if c != cfg.channels:
        raise ShapeError(f"{c} channels do not split into "
                         f"{cfg.num_heads} heads of {cfg.head_dim}")
    d = cfg.head_dim
    outputs = [op(q[:, h * d:(h + 1) * d], k[:, h * d:(h + 1) * d],
                  v[:, h * d:(h + 1) * d]) for h in range(cfg.num_heads)]
    out = np.concatenate(outputs, axis=1)
    if w_out is not None:
        out = out @ as_f64(w_out)
        if b_out is not None:
            out = out + as_f64(b_out)
    return out


def _check_single_head(q, k, v):
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("expected 2-D (tokens, dim) arrays")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention shapes disagree: {q.shape}, {k.shape}, {v.shape}")
