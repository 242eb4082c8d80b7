"""The full backbone: convolutional stem, four stages of alternating local
window attention (LWA) and linear global attention (LGA) blocks, patch
merging between stages, and a pooled classifier head.

Stage i holds stage_pairs[i] consecutive (LWA, LGA) pairs; LWA refines
short-range structure inside non-overlapping windows while LGA builds
global token interactions in linear time, re-concentrated locally by the
LCM. Channel dims double and token counts quarter at each patch merge.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator, Mapping

import numpy as np

from . import adjoints
from .attention import FEATURE_MAPS
from .numerics import ShapeError, as_f64

__all__ = [
    "ModelConfig", "WeightStore", "WeightRecord", "variant_config", "VARIANTS",
    "weight_spec", "param_count", "check_weights", "stem_forward",
    "patch_merge", "lwa_block", "lga_block", "forward", "forward_with_tape",
    "forward_vjp",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters (see variant_config for named presets)."""

    stem_dims: tuple[int, int]
    stage_dims: tuple[int, int, int, int]
    stage_heads: tuple[int, int, int, int]
    stage_pairs: tuple[int, int, int, int]
    window: int = 7
    lcm_kernel: int = 7
    mlp_ratio: float = 4.0
    num_classes: int = 1000
    clamp_floor: float = 100.0
    feature_map: str = "relu"
    drop_path_rate: float = 0.0  # inference builds keep this at 0

    def __post_init__(self):
        if len(self.stage_dims) != 4 or len(self.stage_heads) != 4 \
                or len(self.stage_pairs) != 4:
            raise ValueError("stage_dims/stage_heads/stage_pairs must have 4 entries")
        for i in range(3):
            if self.stage_dims[i + 1] != 2 * self.stage_dims[i]:
                raise ValueError("stage dims must double between stages")
            if self.stage_heads[i + 1] != 2 * self.stage_heads[i]:
                raise ValueError("stage heads must double between stages")
        for dim, heads in zip(self.stage_dims, self.stage_heads):
            if dim % heads:
                raise ValueError(f"dim {dim} not divisible by {heads} heads")
        if any(p < 1 for p in self.stage_pairs):
            raise ValueError("each stage needs at least one block pair")
        if self.stem_dims[1] != self.stage_dims[0]:
            raise ValueError("second stem dim must equal the stage-1 dim")
        if self.window < 1:
            raise ValueError("window must be positive")
        if self.lcm_kernel < 1 or self.lcm_kernel % 2 == 0:
            raise ValueError("lcm_kernel must be odd and positive")
        if self.mlp_ratio <= 0 or self.num_classes < 1:
            raise ValueError("mlp_ratio and num_classes must be positive")
        if not self.clamp_floor >= 1e-6:
            raise ValueError("clamp_floor must be >= 1e-6")
        if self.feature_map not in FEATURE_MAPS:
            raise ValueError(f"unknown feature map {self.feature_map!r}")
        if self.drop_path_rate != 0.0:
            raise ValueError("stochastic depth is training-only; rate must be 0")

    def mlp_hidden(self, dim: int) -> int:
        return int(round(dim * self.mlp_ratio))

    def blocks_in_stage(self, i: int) -> int:
        return 2 * self.stage_pairs[i]


_TINY = ModelConfig(stem_dims=(48, 96), stage_dims=(96, 192, 384, 768),
                    stage_heads=(3, 6, 12, 24), stage_pairs=(1, 1, 3, 1))
VARIANTS: dict[str, ModelConfig] = {
    "tiny": _TINY,
    "small": replace(_TINY, stage_pairs=(1, 1, 9, 1)),
    "base": ModelConfig(stem_dims=(64, 128), stage_dims=(128, 256, 512, 1024),
                        stage_heads=(4, 8, 16, 32), stage_pairs=(1, 1, 9, 1)),
}


def variant_config(name: str, **overrides) -> ModelConfig:
    try:
        base = VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; pick from {sorted(VARIANTS)}")
    return replace(base, **overrides) if overrides else base


class WeightStore:
    """Named tensor collection with deterministic (lexicographic) iteration."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        self._data: dict[str, np.ndarray] = {}
        if tensors:
            for name, value in tensors.items():
                self[name] = value

    def __setitem__(self, name: str, value) -> None:
        if not isinstance(name, str) or not name:
            raise ValueError("tensor names must be non-empty strings")
        self._data[name] = as_f64(value)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._data[name]
        except KeyError:
            raise KeyError(f"weight store has no tensor named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def __len__(self) -> int:
        return len(self._data)

    def names(self) -> list[str]:
        return sorted(self._data)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in self.names():
            yield name, self._data[name]

    def copy(self) -> "WeightStore":
        out = WeightStore()
        out._data = {k: v.copy() for k, v in self._data.items()}
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightStore):
            return NotImplemented
        return (self.names() == other.names()
                and all(np.array_equal(self._data[n], other._data[n])
                        for n in self._data))


class _PrefixView:
    """Read-only view of a WeightStore under a fixed name prefix."""

    __slots__ = ("_store", "_prefix")

    def __init__(self, store: WeightStore, prefix: str):
        self._store = store
        self._prefix = prefix

    def __getitem__(self, name: str) -> np.ndarray:
        return self._store[self._prefix + name]


@dataclass(frozen=True)
class WeightRecord:
    """One tensor the model demands: shape, initialization rule, and whether
    it is learnable (batch-norm running statistics are not)."""

    name: str
    shape: tuple[int, ...]
    init: str  # trunc_normal | zeros | ones | const
    learnable: bool = True
    const: float | None = None

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


def _block_records(prefix: str, dim: int, kind: str,
                   cfg: ModelConfig) -> Iterator[WeightRecord]:
    hidden = cfg.mlp_hidden(dim)
    yield WeightRecord(prefix + "cpe.conv.weight", (dim, 1, 3, 3), "trunc_normal")
    yield WeightRecord(prefix + "cpe.conv.bias", (dim,), "zeros")
    yield WeightRecord(prefix + "norm1.gamma", (dim,), "ones")
    yield WeightRecord(prefix + "norm1.beta", (dim,), "zeros")
    yield WeightRecord(prefix + "attn.qkv.weight", (dim, 3 * dim), "trunc_normal")
    yield WeightRecord(prefix + "attn.qkv.bias", (3 * dim,), "zeros")
    yield WeightRecord(prefix + "attn.proj.weight", (dim, dim), "trunc_normal")
    yield WeightRecord(prefix + "attn.proj.bias", (dim,), "zeros")
    if kind == "lga":
        k = cfg.lcm_kernel
        yield WeightRecord(prefix + "attn.scale", (), "const",
                           const=math.sqrt(dim))
        yield WeightRecord(prefix + "lcm.norm.gamma", (dim,), "ones")
        yield WeightRecord(prefix + "lcm.norm.beta", (dim,), "zeros")
        yield WeightRecord(prefix + "lcm.conv1.weight", (dim, 1, k, k), "trunc_normal")
        yield WeightRecord(prefix + "lcm.conv1.bias", (dim,), "zeros")
        yield WeightRecord(prefix + "lcm.bn.gamma", (dim,), "ones")
        yield WeightRecord(prefix + "lcm.bn.beta", (dim,), "zeros")
        yield WeightRecord(prefix + "lcm.bn.mean", (dim,), "zeros", learnable=False)
        yield WeightRecord(prefix + "lcm.bn.var", (dim,), "ones", learnable=False)
        yield WeightRecord(prefix + "lcm.conv2.weight", (dim, 1, k, k), "trunc_normal")
        yield WeightRecord(prefix + "lcm.conv2.bias", (dim,), "zeros")
    yield WeightRecord(prefix + "norm2.gamma", (dim,), "ones")
    yield WeightRecord(prefix + "norm2.beta", (dim,), "zeros")
    yield WeightRecord(prefix + "mlp.fc1.weight", (dim, hidden), "trunc_normal")
    yield WeightRecord(prefix + "mlp.fc1.bias", (hidden,), "zeros")
    yield WeightRecord(prefix + "mlp.fc2.weight", (hidden, dim), "trunc_normal")
    yield WeightRecord(prefix + "mlp.fc2.bias", (dim,), "zeros")


def weight_spec(cfg: ModelConfig) -> Iterator[WeightRecord]:
    """Every tensor of a model, in forward order (the order in which the
    deterministic initializer consumes random draws)."""
    d1, c0 = cfg.stem_dims
    yield WeightRecord("stem.conv1.weight", (d1, 3, 3, 3), "trunc_normal")
    yield WeightRecord("stem.conv1.bias", (d1,), "zeros")
    yield WeightRecord("stem.conv2.weight", (c0, d1, 3, 3), "trunc_normal")
    yield WeightRecord("stem.conv2.bias", (c0,), "zeros")
    yield WeightRecord("stem.norm.gamma", (c0,), "ones")
    yield WeightRecord("stem.norm.beta", (c0,), "zeros")
    for i, dim in enumerate(cfg.stage_dims):
        for j in range(cfg.blocks_in_stage(i)):
            kind = "lwa" if j % 2 == 0 else "lga"
            yield from _block_records(f"stages.{i}.blocks.{j}.", dim, kind, cfg)
        if i < 3:
            nxt = cfg.stage_dims[i + 1]
            yield WeightRecord(f"merges.{i}.conv.weight", (nxt, dim, 2, 2),
                               "trunc_normal")
            yield WeightRecord(f"merges.{i}.conv.bias", (nxt,), "zeros")
            yield WeightRecord(f"merges.{i}.norm.gamma", (nxt,), "ones")
            yield WeightRecord(f"merges.{i}.norm.beta", (nxt,), "zeros")
    c3 = cfg.stage_dims[3]
    yield WeightRecord("norm.gamma", (c3,), "ones")
    yield WeightRecord("norm.beta", (c3,), "zeros")
    yield WeightRecord("head.weight", (c3, cfg.num_classes), "trunc_normal")
    yield WeightRecord("head.bias", (cfg.num_classes,), "zeros")


def param_count(cfg: ModelConfig) -> int:
    """Exact learnable-parameter count (running statistics excluded)."""
    return sum(r.size for r in weight_spec(cfg) if r.learnable)


def check_weights(cfg: ModelConfig, store: WeightStore) -> None:
    """Raise if any demanded tensor is missing or mis-shaped."""
    for record in weight_spec(cfg):
        arr = store[record.name]
        if arr.shape != record.shape:
            raise ShapeError(f"{record.name}: stored shape {arr.shape} "
                             f"!= expected {record.shape}")


# ---------------------------------------------------------------------------
# forward pass


def stem_forward(img, weights) -> tuple[np.ndarray, tuple[int, int]]:
    """(3, H, W) image -> ((H/4 * W/4, C) tokens, (H/4, W/4))."""
    img = as_f64(img)
    if img.ndim != 3 or img.shape[1] % 4 or img.shape[2] % 4:
        raise ShapeError("stem needs a (3, H, W) image with H, W divisible by 4")
    tokens, hw, _ = adjoints.stem_fwd(img, weights, keep=False)
    return tokens, hw


def patch_merge(x, hw, weights) -> tuple[np.ndarray, tuple[int, int]]:
    """(N, C) tokens -> (N/4, 2C) tokens; weights keyed conv.* / norm.*."""
    out, new_hw, _ = adjoints.patch_merge_fwd(as_f64(x), hw, weights, "", keep=False)
    return out, new_hw


def lwa_block(x, hw, weights, num_heads: int, window: int) -> np.ndarray:
    return adjoints.lwa_block_fwd(as_f64(x), hw, weights, num_heads, window,
                                  keep=False)[0]


def lga_block(x, hw, weights, num_heads: int, feature_map: str = "relu",
              clamp_floor: float = 100.0, lcm_kernel: int = 7) -> np.ndarray:
    return adjoints.lga_block_fwd(as_f64(x), hw, weights, num_heads,
                                  feature_map, clamp_floor, lcm_kernel,
                                  keep=False)[0]


def _run(img, cfg: ModelConfig, store: WeightStore, keep: bool,
         trace=None, capture=None):
    img = as_f64(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError("expected a (3, H, W) image")
    if img.shape[1] % 4 or img.shape[2] % 4:
        raise ShapeError("image extents must be divisible by 4")
    check_weights(cfg, store)
    tape = {"blocks": []}
    x, hw, stem_ctx = adjoints.stem_fwd(img, _PrefixView(store, ""), keep)
    tape["stem"] = stem_ctx
    for i in range(4):
        heads = cfg.stage_heads[i]
        for j in range(cfg.blocks_in_stage(i)):
            prefix = f"stages.{i}.blocks.{j}."
            wd = _PrefixView(store, prefix)
            if j % 2 == 0:
                x, ctx = adjoints.lwa_block_fwd(x, hw, wd, heads, cfg.window, keep)
                tape["blocks"].append(("lwa", prefix, ctx))
                if trace is not None:
                    trace.append(("lwa", i))
            else:
                x, ctx = adjoints.lga_block_fwd(
                    x, hw, wd, heads, cfg.feature_map, cfg.clamp_floor,
                    cfg.lcm_kernel, keep, capture=capture, name=prefix.rstrip("."))
                tape["blocks"].append(("lga", prefix, ctx))
                if trace is not None:
                    trace.append(("lga", i))
        if i < 3:
            prefix = f"merges.{i}."
            x, hw, ctx = adjoints.patch_merge_fwd(
                x, hw, _PrefixView(store, prefix), "", keep)
            tape["blocks"].append(("merge", prefix, ctx))
    logits, head_ctx = adjoints.head_fwd(x, _PrefixView(store, ""), keep)
    tape["head"] = head_ctx
    return logits, tape


def forward(img, cfg: ModelConfig, weights: WeightStore,
            trace=None, capture=None) -> np.ndarray:
    """Full inference pass: (3, H, W) image -> (num_classes,) logits.

    `trace`, when a list, collects ("lwa"|"lga", stage index) per executed
    block; `capture`, when a list, collects materialized LGA attention
    matrices for analysis.
    """
    return _run(img, cfg, weights, keep=False, trace=trace, capture=capture)[0]


def forward_with_tape(img, cfg: ModelConfig, weights: WeightStore):
    """Forward pass that keeps every residual needed by forward_vjp."""
    return _run(img, cfg, weights, keep=True)


def forward_vjp(tape, glogits) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Backpropagate d(loss)/d(logits) to the image and every weight."""
    grads: dict[str, np.ndarray] = {}
    gx, head_grads = adjoints.head_vjp(tape["head"], as_f64(glogits))
    grads.update(head_grads)
    for kind, prefix, ctx in reversed(tape["blocks"]):
        if kind == "lwa":
            gx, local = adjoints.lwa_block_vjp(ctx, gx)
        elif kind == "lga":
            gx, local = adjoints.lga_block_vjp(ctx, gx)
        else:
            gx, local = adjoints.patch_merge_vjp(ctx, gx, "")
        grads.update({prefix + k: v for k, v in local.items()})
    gimg, stem_grads = adjoints.stem_vjp(tape["stem"], gx)
    grads.update(stem_grads)
    return gimg, grads
