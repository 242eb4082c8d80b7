"""Dense float64 primitives: matmul, row softmax, activations, 2-D
convolution (dense and depth-wise), normalization, pooling.

Conventions: token sequences are (N, C) arrays, image grids are (C, H, W),
everything is C-contiguous float64. All functions are pure; shape violations
raise ShapeError, and finite inputs that satisfy the stated preconditions
produce finite outputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DegenerateInputError(ValueError):
    """Input lies in an operation's excluded degenerate set."""


def as_f64(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    # ascontiguousarray would promote 0-d scalars to 1-d
    return arr if arr.ndim == 0 else np.ascontiguousarray(arr)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution (cross-correlation, zero padding)."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w",
                     "stride", "groups"):
            if getattr(self, name) < 1:
                raise ShapeError(f"ConvSpec.{name} must be >= 1")
        if self.padding < 0:
            raise ShapeError("ConvSpec.padding must be >= 0")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError("groups must divide both channel counts")

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups,
                self.kernel_h, self.kernel_w)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv output collapses: {h}x{w} with {self}")
        return oh, ow


def matmul(a, b) -> np.ndarray:
    """c[i,j] = sum_k a[i,k] * b[k,j] for 2-D operands."""
    a, b = as_f64(a), as_f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims disagree: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(a) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability."""
    a = as_f64(a)
    if a.ndim < 2:
        raise ShapeError("softmax_rows expects at least 2-D input")
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def gelu(x) -> np.ndarray:
    """Exact Gaussian-CDF form: x * Phi(x)."""
    x = as_f64(x)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x) -> np.ndarray:
    x = as_f64(x)
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


LEAKY_SLOPE = 0.01

_ACTIVATIONS = {
    "relu": lambda x: np.maximum(x, 0.0),
    "leaky_relu": lambda x: np.where(x >= 0.0, x, LEAKY_SLOPE * x),
    "gelu": gelu,
    "identity": lambda x: x,
}


def activation(a, kind: str) -> np.ndarray:
    a = as_f64(a)
    try:
        return _ACTIVATIONS[kind](a)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def conv2d(x, w, b, spec: ConvSpec) -> np.ndarray:
    """Cross-correlate (C_in, H, W) with weights (C_out, C_in/groups, kh, kw).

    Zero padding, positive stride, grouped channels; the depth-wise case
    (groups == C_in == C_out) takes a vectorized single-pass branch.
    """
    x, w = as_f64(x), as_f64(w)
    if x.ndim != 3 or x.shape[0] != spec.in_channels:
        raise ShapeError(f"input {x.shape} does not match {spec}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"weight {w.shape} != expected {spec.weight_shape}")
    if b is not None:
        b = as_f64(b)
        if b.shape != (spec.out_channels,):
            raise ShapeError(f"bias {b.shape} != ({spec.out_channels},)")
    oh, ow = spec.out_hw(x.shape[1], x.shape[2])
    win = _conv_windows(x, spec)  # (C_in, oh, ow, kh, kw)

    if spec.depthwise:
        y = np.einsum("chwij,cij->chw", win, w[:, 0], optimize=True)
    elif spec.groups == 1:
        cols = win.transpose(0, 3, 4, 1, 2).reshape(-1, oh * ow)
        y = (w.reshape(spec.out_channels, -1) @ cols).reshape(
            spec.out_channels, oh, ow)
    else:
        cpg_in = spec.in_channels // spec.groups
        cpg_out = spec.out_channels // spec.groups
        y = np.empty((spec.out_channels, oh, ow))
        for g in range(spec.groups):
            wg = w[g * cpg_out:(g + 1) * cpg_out].reshape(cpg_out, -1)
            cols = win[g * cpg_in:(g + 1) * cpg_in].transpose(
                0, 3, 4, 1, 2).reshape(-1, oh * ow)
            y[g * cpg_out:(g + 1) * cpg_out] = (wg @ cols).reshape(
                cpg_out, oh, ow)
    if b is not None:
        y = y + b[:, None, None]
    return y


def _conv_windows(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Strided sliding windows of the zero-padded input (view when possible)."""
    p, s = spec.padding, spec.stride
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (spec.kernel_h, spec.kernel_w), axis=(1, 2))
    return win[:, ::s, ::s]


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Per-row standardization (population variance) followed by affine."""
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    x, gamma, beta = as_f64(x), as_f64(gamma), as_f64(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != gamma.shape:
        raise ShapeError(f"layer_norm shapes: {x.shape}, {gamma.shape}, {beta.shape}")
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=1, keepdims=True)
    return centered / np.sqrt(var + eps) * gamma + beta


def batch_norm_inference(x, mean, var, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Per-channel normalization of a (C, H, W) grid with stored statistics."""
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    x, mean, var = as_f64(x), as_f64(mean), as_f64(var)
    gamma, beta = as_f64(gamma), as_f64(beta)
    c = x.shape[0]
    if x.ndim != 3 or any(t.shape != (c,) for t in (mean, var, gamma, beta)):
        raise ShapeError("batch_norm_inference shape mismatch")
    if np.any(var < 0.0):
        raise ValueError("variance must be non-negative")
    scale = gamma / np.sqrt(var + eps)
    return (x - mean[:, None, None]) * scale[:, None, None] + beta[:, None, None]


def global_avg_pool(x) -> np.ndarray:
    """Column means of a (N, C) token sequence."""
    x = as_f64(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError("global_avg_pool expects a non-empty (N, C) array")
    return x.mean(axis=0)


def tokens_to_grid(x, hw: tuple[int, int]) -> np.ndarray:
    """(N, C) tokens in row-major spatial order -> (C, H, W) grid."""
    x = as_f64(x)
    h, w = hw
    if x.ndim != 2 or x.shape[0] != h * w:
        raise ShapeError(f"token count {x.shape} != {h}x{w}")
    return x.reshape(h, w, -1).transpose(2, 0, 1)


def grid_to_tokens(g) -> np.ndarray:
    """(C, H, W) grid -> (H*W, C) tokens in row-major spatial order."""
    g = as_f64(g)
    if g.ndim != 3:
        raise ShapeError("grid_to_tokens expects (C, H, W)")
    c = g.shape[0]
    return np.ascontiguousarray(g.transpose(1, 2, 0).reshape(-1, c))
