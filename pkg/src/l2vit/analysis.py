"""Verification toolkit: analytic FLOP accounting, direct-vs-factored
runtime benchmarking, finite-difference gradient checks against the
hand-written adjoints, the denominator-clamp sweep, and attention-map
concentration statistics.

FLOP convention: one multiply-accumulate = 1 FLOP; normalization,
activation, and softmax costs are excluded (the convention under which the
published figures for comparable backbones are consistent).
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from . import adjoints, weights
from .attention import (AttentionConfig, linear_attention_direct,
                        linear_attention_factored)
from .model import (ModelConfig, WeightStore, forward, forward_with_tape,
                    forward_vjp, variant_config, weight_spec)

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - declared dependency
    threadpool_limits = None


# ---------------------------------------------------------------------------
# FLOP accounting


@dataclass(frozen=True)
class FlopRecord:
    name: str
    macs: int


@dataclass
class FlopReport:
    """Per-layer multiply-accumulate counts with totals."""

    records: list[FlopRecord] = field(default_factory=list)

    def add(self, name: str, macs: int) -> None:
        if macs < 0:
            raise ValueError("MAC counts must be non-negative")
        self.records.append(FlopRecord(name, int(macs)))

    @property
    def total(self) -> int:
        return sum(r.macs for r in self.records)

    @property
    def giga(self) -> float:
        return self.total / 1e9

    def grouped(self, depth: int = 2) -> list[tuple[str, int]]:
        """Aggregate records by the first `depth` name components."""
        sums: dict[str, int] = {}
        for r in self.records:
            key = ".".join(r.name.split(".")[:depth])
            sums[key] = sums.get(key, 0) + r.macs
        return list(sums.items())

    def write_csv(self, fh) -> None:
        writer = csv.writer(fh)
        writer.writerow(["name", "macs"])
        for r in self.records:
            writer.writerow([r.name, r.macs])
        writer.writerow(["total", self.total])


def _padded_tokens(h: int, w: int, window: int) -> int:
    hp = math.ceil(h / window) * window
    wp = math.ceil(w / window) * window
    return hp * wp


def flop_count(cfg: ModelConfig, input_hw: tuple[int, int]) -> FlopReport:
    """Analytic MAC counts for a full forward pass at the given input size.

    Convolutions cost C_out * C_in/groups * k^2 * H' * W'; window attention
    costs 2 * N_padded * window^2 * C (scores plus weighted values); the
    factored global attention costs 2 * N * d^2 per head plus projections.
    """
    h, w = input_hw
    if h % 4 or w % 4:
        raise ValueError("input extents must be divisible by 4")
    report = FlopReport()
    d1, c0 = cfg.stem_dims
    report.add("stem.conv1", 3 * d1 * 9 * (h // 2) * (w // 2))
    report.add("stem.conv2", d1 * c0 * 9 * (h // 4) * (w // 4))
    hs, ws = h // 4, w // 4
    for i, dim in enumerate(cfg.stage_dims):
        n = hs * ws
        heads = cfg.stage_heads[i]
        head_dim = dim // heads
        hidden = cfg.mlp_hidden(dim)
        for j in range(cfg.blocks_in_stage(i)):
            p = f"stages.{i}.blocks.{j}."
            report.add(p + "cpe", dim * 9 * n)
            report.add(p + "attn.qkv", n * dim * 3 * dim)
            if j % 2 == 0:
                n_pad = _padded_tokens(hs, ws, cfg.window)
                report.add(p + "attn.window", 2 * n_pad * cfg.window ** 2 * dim)
            else:
                report.add(p + "attn.global", 2 * n * head_dim ** 2 * heads)
                report.add(p + "lcm", 2 * dim * cfg.lcm_kernel ** 2 * n)
            report.add(p + "attn.proj", n * dim * dim)
            report.add(p + "mlp", 2 * n * dim * hidden)
        if i < 3:
            if hs % 2 or ws % 2:
                raise ValueError(f"stage {i} grid {hs}x{ws} cannot be merged; "
                                 f"the forward pass would reject this input size")
            nxt = cfg.stage_dims[i + 1]
            hs, ws = hs // 2, ws // 2
            report.add(f"merges.{i}", dim * nxt * 4 * hs * ws)
    report.add("head", cfg.stage_dims[3] * cfg.num_classes)
    return report


# ---------------------------------------------------------------------------
# runtime benchmark


@dataclass(frozen=True)
class BenchRow:
    n: int
    t_direct: float
    t_factored: float


def bench_orders(n_list, d: int = 32, repetitions: int = 9, warmups: int = 2,
                 seed: int = 0) -> list[BenchRow]:
    """Median wall time of each evaluation order, single-threaded.

    n_list must be sorted ascending. The direct order materializes the
    N x N matrix (quadratic); the factored order forms the d x d key-value
    product first (linear in N).
    """
    n_list = list(n_list)
    if n_list != sorted(n_list):
        raise ValueError("n_list must be sorted ascending")
    if repetitions < 1:
        raise ValueError("need at least one repetition")
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(num_heads=1, head_dim=d, feature_map="relu",
                          clamp_floor=1e-6, scale_s=1.0)
    rows = []
    limiter = threadpool_limits(limits=1) if threadpool_limits else None
    try:
        for n in n_list:
            q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
            t_direct = _median_time(
                lambda: linear_attention_direct(q, k, v, cfg), repetitions, warmups)
            t_factored = _median_time(
                lambda: linear_attention_factored(q, k, v, cfg), repetitions, warmups)
            rows.append(BenchRow(n, t_direct, t_factored))
    finally:
        if limiter is not None:
            limiter.unregister()
    return rows


def _median_time(fn, repetitions: int, warmups: int) -> float:
    for _ in range(warmups):
        fn()
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def fit_loglog_slope(ns, ts) -> float:
    return float(np.polyfit(np.log(np.asarray(ns, float)),
                            np.log(np.asarray(ts, float)), 1)[0])


def top_decade_slopes(rows: list[BenchRow]) -> tuple[float, float]:
    """Log-log slopes of (direct, factored) over the top decade of N."""
    cutoff = rows[-1].n / 10.0
    sel = [r for r in rows if r.n >= cutoff]
    if len(sel) < 2:
        raise ValueError("need at least two sizes within the top decade")
    ns = [r.n for r in sel]
    return (fit_loglog_slope(ns, [r.t_direct for r in sel]),
            fit_loglog_slope(ns, [r.t_factored for r in sel]))


def write_bench_csv(rows: list[BenchRow], fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(["n", "t_direct", "t_factored"])
    for r in rows:
        writer.writerow([r.n, repr(r.t_direct), repr(r.t_factored)])


# ---------------------------------------------------------------------------
# gradient checks


GRAD_TARGETS = ("linear", "attn", "lcm", "cpe", "lwa", "lga", "block", "model")
GRAD_TOLERANCES = {"linear": 1e-9, "attn": 1e-5, "lcm": 1e-4, "cpe": 1e-4,
                   "lwa": 1e-4, "lga": 1e-4, "block": 1e-4, "model": 1e-4}


def grad_check(op_id: str, seed: int = 0, points: int = 5,
               directions: int = 3, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference
    directional derivatives over random points and directions.

    A random unit covector w fixes the scalar loss L = <w, output>; the
    analytic side is the hand-written vector-Jacobian product, the numeric
    side is (L(theta + h u) - L(theta - h u)) / 2h for random unit
    directions u over all checked inputs/parameters jointly. Points where a
    rectifier input or clamp margin sits within 1e-6 of its kink are
    resampled where the target exposes them.
    """
    if op_id == "block":
        return max(grad_check("lwa", seed, points, directions, h),
                   grad_check("lga", seed, points, directions, h))
    builder = _GRAD_BUILDERS.get(op_id)
    if builder is None:
        raise ValueError(f"unknown grad target {op_id!r}; pick from {GRAD_TARGETS}")
    worst = 0.0
    rng = np.random.default_rng(np.uint64(seed))
    for _ in range(points):
        for _ in range(32):  # resampling budget for kink guards
            theta, run, vjp_grads, kink_ok = builder(rng)
            if kink_ok():
                break
        else:
            raise RuntimeError(f"could not sample {op_id} away from kinks")
        out, tape = run(theta, keep=True)
        w = rng.standard_normal(out.shape)
        w /= np.sqrt((w * w).sum())
        analytic = vjp_grads(tape, w)
        for _ in range(directions):
            u = {k: rng.standard_normal(np.shape(theta[k])) for k in theta}
            norm = math.sqrt(sum((g * g).sum() for g in u.values()))
            u = {k: g / norm for k, g in u.items()}
            plus = {k: theta[k] + h * u[k] for k in theta}
            minus = {k: theta[k] - h * u[k] for k in theta}
            numeric = (float((w * run(plus, keep=False)[0]).sum())
                       - float((w * run(minus, keep=False)[0]).sum())) / (2 * h)
            analytic_dir = float(sum((analytic[k] * u[k]).sum() for k in theta))
            err = abs(analytic_dir - numeric) / max(abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def _build_linear(rng):
    theta = {"x": rng.standard_normal((5, 4)),
             "w": rng.standard_normal((4, 3)),
             "b": rng.standard_normal(3)}

    def run(t, keep):
        return adjoints.linear_fwd(t["x"], t["w"], t["b"], keep)

    def vjp_grads(tape, w):
        gx, gw, gb = adjoints.linear_vjp(tape, w)
        return {"x": gx, "w": gw, "b": gb}

    return theta, run, vjp_grads, lambda: True


def _build_attn(rng):
    n, d = 12, 8
    theta = {"q": rng.standard_normal((n, d)), "k": rng.standard_normal((n, d)),
             "v": rng.standard_normal((n, d)),
             "s": np.asarray(float(rng.uniform(0.5, 3.0)))}
    clamp_floor = 1e-2

    def cfg_of(t):
        return AttentionConfig(num_heads=1, head_dim=d, feature_map="relu",
                               clamp_floor=clamp_floor, scale_s=float(t["s"]))

    def run(t, keep):
        return adjoints.factored_attention_fwd(t["q"], t["k"], t["v"], cfg_of(t), keep)

    def vjp_grads(tape, w):
        gq, gk, gv, gs = adjoints.factored_attention_vjp(tape, w)
        return {"q": gq, "k": gk, "v": gv, "s": np.asarray(gs)}

    def kink_ok():
        if min(np.abs(theta["q"]).min(), np.abs(theta["k"]).min()) < 1e-6:
            return False
        cfg = cfg_of(theta)
        raw = adjoints._factored_parts(theta["q"], theta["k"], theta["v"], cfg)[5]
        margin = np.abs(raw - cfg.clamp_floor / cfg.scale_s)
        return bool(margin.min() > 1e-4)

    return theta, run, vjp_grads, kink_ok


def _rand_vec(rng, n, scale=0.3):
    return rng.normal(0.0, scale, n)


def _rand_lcm_theta(rng, dim, kernel):
    return {
        "lcm.norm.gamma": 1.0 + _rand_vec(rng, dim, 0.2),
        "lcm.norm.beta": _rand_vec(rng, dim, 0.2),
        "lcm.conv1.weight": rng.normal(0.0, 0.3, (dim, 1, kernel, kernel)),
        "lcm.conv1.bias": _rand_vec(rng, dim, 0.1),
        "lcm.bn.gamma": 1.0 + _rand_vec(rng, dim, 0.2),
        "lcm.bn.beta": _rand_vec(rng, dim, 0.2),
        "lcm.conv2.weight": rng.normal(0.0, 0.3, (dim, 1, kernel, kernel)),
        "lcm.conv2.bias": _rand_vec(rng, dim, 0.1),
    }


def _lcm_buffers(rng, dim):
    return {"lcm.bn.mean": _rand_vec(rng, dim, 0.2),
            "lcm.bn.var": rng.uniform(0.5, 1.5, dim)}


def _build_lcm(rng):
    dim, hw, kernel = 6, (7, 7), 3
    theta = {"x": rng.standard_normal((hw[0] * hw[1], dim))}
    theta.update(_rand_lcm_theta(rng, dim, kernel))
    buffers = _lcm_buffers(rng, dim)

    def run(t, keep):
        p = adjoints.lcm_params_from({**buffers, **t}, dim, kernel)
        return adjoints.lcm_residual_fwd(t["x"], hw, p, keep)

    def vjp_grads(tape, w):
        gx, grads = adjoints.lcm_residual_vjp(tape, w)
        return {"x": gx, **grads}

    return theta, run, vjp_grads, lambda: True


def _build_cpe(rng):
    dim, hw = 4, (4, 4)
    theta = {"x": rng.standard_normal((16, dim)),
             "cpe.conv.weight": rng.normal(0.0, 0.3, (dim, 1, 3, 3)),
             "cpe.conv.bias": _rand_vec(rng, dim, 0.1)}

    def run(t, keep):
        return adjoints.cpe_fwd(t["x"], hw, t, keep)

    def vjp_grads(tape, w):
        gx, grads = adjoints.cpe_vjp(tape, w)
        return {"x": gx, **grads}

    return theta, run, vjp_grads, lambda: True


def _rand_block_theta(rng, dim, hidden, kind, lcm_kernel):
    proj_std = 1.0 / math.sqrt(dim)
    theta = {
        "cpe.conv.weight": rng.normal(0.0, 0.3, (dim, 1, 3, 3)),
        "cpe.conv.bias": _rand_vec(rng, dim, 0.1),
        "norm1.gamma": 1.0 + _rand_vec(rng, dim, 0.2),
        "norm1.beta": _rand_vec(rng, dim, 0.2),
        "attn.qkv.weight": rng.normal(0.0, proj_std, (dim, 3 * dim)),
        "attn.qkv.bias": _rand_vec(rng, 3 * dim, 0.1),
        "attn.proj.weight": rng.normal(0.0, proj_std, (dim, dim)),
        "attn.proj.bias": _rand_vec(rng, dim, 0.1),
        "norm2.gamma": 1.0 + _rand_vec(rng, dim, 0.2),
        "norm2.beta": _rand_vec(rng, dim, 0.2),
        "mlp.fc1.weight": rng.normal(0.0, proj_std, (dim, hidden)),
        "mlp.fc1.bias": _rand_vec(rng, hidden, 0.1),
        "mlp.fc2.weight": rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, dim)),
        "mlp.fc2.bias": _rand_vec(rng, dim, 0.1),
    }
    if kind == "lga":
        theta["attn.scale"] = np.asarray(float(rng.uniform(1.0, 3.0)))
        theta.update(_rand_lcm_theta(rng, dim, lcm_kernel))
    return theta


def _build_lwa(rng):
    dim, heads, window, hw = 16, 2, 4, (8, 8)
    theta = {"x": rng.standard_normal((64, dim))}
    theta.update(_rand_block_theta(rng, dim, 2 * dim, "lwa", 0))

    def run(t, keep):
        return adjoints.lwa_block_fwd(t["x"], hw, t, heads, window, keep)

    def vjp_grads(tape, w):
        gx, grads = adjoints.lwa_block_vjp(tape, w)
        return {"x": gx, **grads}

    return theta, run, vjp_grads, lambda: True


def _build_lga(rng):
    dim, heads, hw, kernel = 8, 2, (7, 7), 3
    clamp_floor = 1e-1
    theta = {"x": rng.standard_normal((49, dim))}
    theta.update(_rand_block_theta(rng, dim, 2 * dim, "lga", kernel))
    buffers = _lcm_buffers(rng, dim)

    def run(t, keep):
        return adjoints.lga_block_fwd(t["x"], hw, {**buffers, **t}, heads,
                                      "relu", clamp_floor, kernel, keep)

    def vjp_grads(tape, w):
        gx, grads = adjoints.lga_block_vjp(tape, w)
        return {"x": gx, **grads}

    return theta, run, vjp_grads, lambda: True


def _build_model(rng):
    cfg = variant_config("tiny", stage_pairs=(1, 1, 1, 1))
    seed = int(rng.integers(0, 2 ** 32))
    store = weights.init_weights(cfg, seed)
    img = rng.standard_normal((3, 64, 64))
    learnable = {r.name for r in weight_spec(cfg) if r.learnable}
    theta = {name: store[name] for name in sorted(learnable)}
    buffers = {name: store[name] for name in store.names() if name not in learnable}

    def run(t, keep):
        s = WeightStore({**buffers, **t})
        if keep:
            return forward_with_tape(img, cfg, s)
        return forward(img, cfg, s), None

    def vjp_grads(tape, w):
        _, grads = forward_vjp(tape, w)
        return {k: grads[k] for k in theta}

    return theta, run, vjp_grads, lambda: True


_GRAD_BUILDERS = {
    "linear": _build_linear,
    "attn": _build_attn,
    "lcm": _build_lcm,
    "cpe": _build_cpe,
    "lwa": _build_lwa,
    "lga": _build_lga,
    "model": _build_model,
}


# ---------------------------------------------------------------------------
# clamp sweep


@dataclass(frozen=True)
class ClampRow:
    clamp_floor: float
    divergence: float
    max_activation: float


REFERENCE_CLAMP = 100.0


def clamp_sweep(clamp_values, inputs=None, seed: int = 0) -> list[ClampRow]:
    """Run one fixed attention forward under each denominator floor.

    Reports the max-abs output and the max-abs divergence from the
    default-floor (1e2) reference. Raising the floor can only shrink row
    outputs, so max activation must be non-increasing in the floor; the
    function raises if the measurement ever violates that. Floors below
    the configuration minimum of 1e-6 are evaluated at 1e-6.
    """
    clamp_values = [float(c) for c in clamp_values]
    if any(c <= 0.0 for c in clamp_values):
        raise ValueError("clamp floors must be positive")
    if inputs is None:
        rng = np.random.default_rng(np.uint64(seed))
        # queries/keys scaled so the raw denominators straddle the default
        # floor and the sweep actually exercises the clamp
        q = 0.5 * rng.standard_normal((49, 32))
        k = 0.5 * rng.standard_normal((49, 32))
        v = rng.standard_normal((49, 32))
    else:
        q, k, v = inputs

    def run(floor: float) -> np.ndarray:
        cfg = AttentionConfig(num_heads=1, head_dim=q.shape[1],
                              feature_map="relu", clamp_floor=max(floor, 1e-6),
                              scale_s=1.0)
        return linear_attention_factored(q, k, v, cfg)

    reference = run(REFERENCE_CLAMP)
    rows = []
    for c in clamp_values:
        out = run(c)
        rows.append(ClampRow(c, float(np.abs(out - reference).max()),
                             float(np.abs(out).max())))
    ordered = sorted(rows, key=lambda r: r.clamp_floor)
    for lo, hi in zip(ordered, ordered[1:]):
        if hi.max_activation > lo.max_activation + 1e-12:
            raise RuntimeError("max activation increased with the clamp floor")
    return rows


def write_clamp_csv(rows: list[ClampRow], fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(["clamp_floor", "output_divergence", "max_activation"])
    for r in rows:
        writer.writerow([repr(r.clamp_floor), repr(r.divergence),
                         repr(r.max_activation)])


# ---------------------------------------------------------------------------
# concentration statistics


@dataclass(frozen=True)
class LayerConcentration:
    name: str
    hw: tuple[int, int]
    tokens: int
    heads: int
    entropy_mean: float
    neighborhood_mass: float
    enhanced_mass: float
    negativity: int


@dataclass
class ConcentrationStats:
    """Per-layer attention matrices plus scalar concentration summaries."""

    layers: list[LayerConcentration]
    matrices: dict[str, np.ndarray]
    radius: int

    def write_csv(self, fh) -> None:
        writer = csv.writer(fh)
        writer.writerow(["layer", "tokens", "heads", "entropy_mean",
                         "neighborhood_mass", "enhanced_mass", "negativity"])
        for l in self.layers:
            writer.writerow([l.name, l.tokens, l.heads, repr(l.entropy_mean),
                             repr(l.neighborhood_mass), repr(l.enhanced_mass),
                             l.negativity])


def _box_sums(p: np.ndarray, hw: tuple[int, int], radius: int) -> np.ndarray:
    """For each row (a distribution over the grid), the sum of its mass in
    the Chebyshev-radius box around every grid position. Returns (N, H, W)."""
    h, w = hw
    n = p.shape[0]
    grids = p.reshape(n, h, w)
    ii = np.zeros((n, h + 1, w + 1))
    ii[:, 1:, 1:] = grids.cumsum(axis=1).cumsum(axis=2)
    y0 = np.clip(np.arange(h) - radius, 0, h)
    y1 = np.clip(np.arange(h) + radius + 1, 0, h)
    x0 = np.clip(np.arange(w) - radius, 0, w)
    x1 = np.clip(np.arange(w) + radius + 1, 0, w)
    return (ii[:, y1[:, None], x1[None, :]] - ii[:, y0[:, None], x1[None, :]]
            - ii[:, y1[:, None], x0[None, :]] + ii[:, y0[:, None], x0[None, :]])


def attention_stats(matrix: np.ndarray, hw: tuple[int, int],
                    radius: int = 1) -> tuple[float, float, int]:
    """(mean row entropy in nats, mean neighborhood mass, negativity count).

    Rows are renormalized to distributions; the neighborhood is the
    Chebyshev ball of the given radius around each query's grid position.
    Rows with no mass contribute zero entropy and zero mass.
    """
    h, w = hw
    n = h * w
    if matrix.shape != (n, n):
        raise ValueError(f"matrix {matrix.shape} does not match grid {hw}")
    negativity = int((matrix < 0.0).sum())
    row_sums = matrix.sum(axis=1)
    safe = np.where(row_sums > 0.0, row_sums, 1.0)
    p = np.abs(matrix) / safe[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0.0, p * np.log(p), 0.0)
    entropy = -plogp.sum(axis=1)
    boxes = _box_sums(p, hw, radius)
    ys, xs = np.divmod(np.arange(n), w)
    mass = boxes[np.arange(n), ys, xs]
    return float(entropy.mean()), float(mass.mean()), negativity


def _composed_kernel(k1: np.ndarray, k2: np.ndarray) -> np.ndarray:
    """Channel-averaged magnitude of the cascade of two depth-wise kernels."""
    per_channel = [convolve2d(k2[c, 0], k1[c, 0], mode="full")
                   for c in range(k1.shape[0])]
    return np.abs(np.stack(per_channel)).mean(axis=0)


def _enhanced_mass(matrix: np.ndarray, hw: tuple[int, int], kernel: np.ndarray,
                   radius: int) -> float:
    """Mean neighborhood mass of the residual-plus-smoothing effective map.

    The enhanced path adds the identity (residual) to a spatial aggregation
    of attention rows whose footprint is the composed depth-wise kernel;
    row i of the effective map is e_i + sum_off kernel[off] * A[i + off].
    """
    h, w = hw
    n = h * w
    boxes = _box_sums(matrix, hw, radius)
    row_sums = matrix.sum(axis=1)
    ys, xs = np.divmod(np.arange(n), w)
    num = np.ones(n)   # the identity lands inside its own neighborhood
    den = np.ones(n)
    r = kernel.shape[0] // 2
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            weight = kernel[dy + r, dx + r]
            if weight == 0.0:
                continue
            sy, sx = ys + dy, xs + dx
            valid = (0 <= sy) & (sy < h) & (0 <= sx) & (sx < w)
            src = (sy * w + sx)[valid]
            num[valid] += weight * boxes[src, ys[valid], xs[valid]]
            den[valid] += weight * row_sums[src]
    return float((num / den).mean())


def concentration_stats(cfg: ModelConfig, store: WeightStore, image,
                        radius: int = 1,
                        keep_matrices: bool = True) -> ConcentrationStats:
    """Run a capture-enabled forward pass and summarize every global-attention
    layer: row entropy, neighborhood mass of the plain attention map, the
    same mass for the locally-enhanced effective map, and negativity counts.
    """
    captured: list[dict] = []
    forward(image, cfg, store, capture=captured)
    if not captured:
        raise RuntimeError("forward pass captured no attention layers")
    layers = []
    matrices = {}
    for cap in captured:
        name, hw, matrix = cap["name"], cap["hw"], cap["matrix"]
        entropy, mass, _ = attention_stats(matrix, hw, radius)
        kernel = _composed_kernel(store[name + ".lcm.conv1.weight"],
                                  store[name + ".lcm.conv2.weight"])
        enhanced = _enhanced_mass(matrix, hw, kernel, radius)
        layers.append(LayerConcentration(
            name=name, hw=hw, tokens=matrix.shape[0], heads=cap["heads"],
            entropy_mean=entropy, neighborhood_mass=mass,
            enhanced_mass=enhanced, negativity=cap["negativity"]))
        if keep_matrices:
            matrices[name] = matrix
    return ConcentrationStats(layers=layers, matrices=matrices, radius=radius)
