"""Locality machinery: the local concentration module (LCM), its residual
application, the enhanced linear attention composition, and conditional
positional encoding (CPE).

Linear attention distributes weight over all tokens; the LCM re-concentrates
its output on spatial neighborhoods with two depth-wise convolutions
(GELU and inference-mode batch norm between them). CPE is a residual
depth-wise 3x3 convolution acting as a resolution-flexible position
encoding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .attention import AttentionConfig, _factored_parts
from .numerics import ConvSpec, ShapeError, as_f64


def _depthwise_spec(channels: int, kernel: int) -> ConvSpec:
    if kernel % 2 == 0:
        raise ShapeError("depth-wise kernels must be odd to preserve shape")
    return ConvSpec(channels, channels, kernel, kernel,
                    stride=1, padding=(kernel - 1) // 2, groups=channels)


@dataclass(frozen=True)
class LcmParams:
    """Weights of one local concentration module (all per-channel).

    Both convolutions are depth-wise with padding (kernel-1)/2, so the
    spatial extent is preserved. Batch norm runs on stored statistics.
    ln_gamma/ln_beta belong to the layer norm applied by lcm_residual.
    """

    channels: int
    kernel: int
    conv1_weight: np.ndarray
    conv1_bias: np.ndarray
    conv2_weight: np.ndarray
    conv2_bias: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    ln_gamma: np.ndarray
    ln_beta: np.ndarray

    def __post_init__(self):
        spec = self.conv_spec
        for name in ("conv1_weight", "conv2_weight"):
            if getattr(self, name).shape != spec.weight_shape:
                raise ShapeError(f"{name} shape != {spec.weight_shape}")
        vecs = ("conv1_bias", "conv2_bias", "bn_mean", "bn_var",
                "bn_gamma", "bn_beta", "ln_gamma", "ln_beta")
        for name in vecs:
            if getattr(self, name).shape != (self.channels,):
                raise ShapeError(f"{name} shape != ({self.channels},)")

    @property
    def conv_spec(self) -> ConvSpec:
        return _depthwise_spec(self.channels, self.kernel)


@dataclass(frozen=True)
class CpeParams:
    """Depth-wise 3x3 convolution weights for conditional positional
    encoding (shape-preserving: stride 1, padding 1)."""

    channels: int
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.shape != self.conv_spec.weight_shape:
            raise ShapeError(f"CPE weight shape != {self.conv_spec.weight_shape}")
        if self.bias.shape != (self.channels,):
            raise ShapeError(f"CPE bias shape != ({self.channels},)")

    @property
    def conv_spec(self) -> ConvSpec:
        return _depthwise_spec(self.channels, 3)


def _lcm_parts(x, hw, p: LcmParams, keep: bool):
    """conv -> GELU -> BN(inference) -> conv on the rearranged grid."""
    x = as_f64(x)
    spec = p.conv_spec
    grid = numerics.tokens_to_grid(x, hw)
    pre = numerics.conv2d(grid, p.conv1_weight, p.conv1_bias, spec)
    act = numerics.gelu(pre)
    normed = numerics.batch_norm_inference(
        act, p.bn_mean, p.bn_var, p.bn_gamma, p.bn_beta)
    mixed = numerics.conv2d(normed, p.conv2_weight, p.conv2_bias, spec)
    y = numerics.grid_to_tokens(mixed)
    ctx = (grid, pre, act, normed, hw, p) if keep else None
    return y, ctx


def lcm_forward(x, hw: tuple[int, int], p: LcmParams) -> np.ndarray:
    """Local concentration module on (N, C) tokens laid out on an H x W grid."""
    return _lcm_parts(x, hw, p, keep=False)[0]


def lcm_residual(x, hw: tuple[int, int], p: LcmParams) -> np.ndarray:
    """x + LCM(LN(x)): the residual form in which the module is applied."""
    x = as_f64(x)
    normed = numerics.layer_norm(x, p.ln_gamma, p.ln_beta)
    return lcm_forward(normed, hw, p) + x


def cpe_forward(x, hw: tuple[int, int], p: CpeParams) -> np.ndarray:
    """x + DWConv3x3(x): residual conditional positional encoding."""
    x = as_f64(x)
    grid = numerics.tokens_to_grid(x, hw)
    enc = numerics.conv2d(grid, p.weight, p.bias, p.conv_spec)
    return x + numerics.grid_to_tokens(enc)


def enhanced_linear_attention(q, k, v, hw: tuple[int, int],
                              cfg: AttentionConfig, p: LcmParams) -> np.ndarray:
    """Multi-head factored linear attention followed by the residual LCM.

    q, k, v carry the full channel dim (num_heads * head_dim); heads are
    split internally and concatenated before the LCM.
    """
    q, k, v = as_f64(q), as_f64(k), as_f64(v)
    n, c = q.shape
    if c != cfg.channels:
        raise ShapeError(f"{c} channels != {cfg.num_heads} x {cfg.head_dim}")
    qh = split_heads(q, cfg.num_heads)
    kh = split_heads(k, cfg.num_heads)
    vh = split_heads(v, cfg.num_heads)
    out = merge_heads(_factored_parts(qh, kh, vh, cfg)[7])
    return lcm_residual(out, hw, p)


def split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    """(N, C) -> (num_heads, N, C/num_heads)."""
    n, c = x.shape
    if c % num_heads:
        raise ShapeError(f"{c} channels do not split into {num_heads} heads")
    return np.ascontiguousarray(
        x.reshape(n, num_heads, c // num_heads).transpose(1, 0, 2))


def merge_heads(x: np.ndarray) -> np.ndarray:
    """(num_heads, N, d) -> (N, num_heads * d)."""
    nh, n, d = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2).reshape(n, nh * d))
