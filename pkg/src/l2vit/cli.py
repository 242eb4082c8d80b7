"""Command-line front door.

Subcommands: describe (parameter/FLOP report), forward (logits from a raw
image or a seeded random one), equiv-check (direct vs factored agreement),
gradcheck, bench, clamp-sweep, and attnmap (attention-map export with
concentration statistics).

Exit codes: 0 success, 1 validation failure (bad flags, config, or files),
2 check failure (a measured difference or error above tolerance).
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import analysis
from .attention import FEATURE_MAPS, AttentionConfig, linear_attention_direct, \
    linear_attention_factored
from .model import (ModelConfig, WeightStore, VARIANTS, forward, param_count,
                    variant_config)
from .weights import WeightFormatError, init_weights, load_weights, save_weights

EQUIV_TOLERANCE = 1e-9


class ConfigError(ValueError):
    """A run-configuration file is invalid."""


@dataclass(frozen=True)
class RunConfig:
    """A parsed run configuration: the model plus run-level knobs."""

    variant: str
    model: ModelConfig
    input_size: int = 224
    seed: int = 0
    weights_path: str | None = None
    output_path: str | None = None


_ARCHITECTURE_KEYS = ("stem_dims", "stage_dims", "stage_heads", "stage_pairs",
                      "window", "lcm_kernel", "mlp_ratio")
_RUNTIME_KEYS = ("input_size", "seed", "clamp_floor", "feature_map",
                 "num_classes", "weights_path", "output_path")
_ALL_KEYS = ("variant",) + _ARCHITECTURE_KEYS + _RUNTIME_KEYS


def _parse_int_list(value: str, count: int, key: str) -> tuple[int, ...]:
    try:
        items = tuple(int(part.strip()) for part in value.split(","))
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated integer list")
    if len(items) != count:
        raise ConfigError(f"{key} needs exactly {count} entries")
    return items


def parse_config(text: str) -> RunConfig:
    """Parse line-oriented `key = value` text (# starts a comment).

    Named variants fix the architecture: only runtime keys (seed, paths,
    clamp_floor, input_size, num_classes, feature_map) may be set alongside
    them. The custom variant requires every architecture field.
    """
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in _ALL_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if not value:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        raw[key] = value

    if "variant" not in raw:
        raise ConfigError("variant required")
    variant = raw.pop("variant")
    if variant not in set(VARIANTS) | {"custom"}:
        raise ConfigError(f"unknown variant {variant!r}")

    if variant != "custom":
        for key in _ARCHITECTURE_KEYS:
            if key in raw:
                raise ConfigError(
                    f"cannot override architecture field {key!r} for "
                    f"variant {variant!r}")
        model = VARIANTS[variant]
    else:
        for key in ("stem_dims", "stage_dims", "stage_heads", "stage_pairs",
                    "window", "lcm_kernel"):
            if key not in raw:
                raise ConfigError(f"custom variant requires {key!r}")
        try:
            model = ModelConfig(
                stem_dims=_parse_int_list(raw.pop("stem_dims"), 2, "stem_dims"),
                stage_dims=_parse_int_list(raw.pop("stage_dims"), 4, "stage_dims"),
                stage_heads=_parse_int_list(raw.pop("stage_heads"), 4, "stage_heads"),
                stage_pairs=_parse_int_list(raw.pop("stage_pairs"), 4, "stage_pairs"),
                window=_parse_scalar(raw.pop("window"), int, "window"),
                lcm_kernel=_parse_scalar(raw.pop("lcm_kernel"), int, "lcm_kernel"),
                mlp_ratio=_parse_scalar(raw.pop("mlp_ratio", "4"), float, "mlp_ratio"),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    overrides = {}
    if "clamp_floor" in raw:
        overrides["clamp_floor"] = _parse_scalar(raw.pop("clamp_floor"), float,
                                                 "clamp_floor")
    if "feature_map" in raw:
        fm = raw.pop("feature_map")
        if fm not in FEATURE_MAPS:
            raise ConfigError(f"unknown feature_map {fm!r}")
        overrides["feature_map"] = fm
    if "num_classes" in raw:
        overrides["num_classes"] = _parse_scalar(raw.pop("num_classes"), int,
                                                 "num_classes")
    try:
        if overrides:
            model = replace(model, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    input_size = _parse_scalar(raw.pop("input_size", "224"), int, "input_size")
    if input_size < 4 or input_size % 4:
        raise ConfigError("input_size must be a positive multiple of 4")
    seed = _parse_scalar(raw.pop("seed", "0"), int, "seed")
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must fit in 64 unsigned bits")
    return RunConfig(variant=variant, model=model, input_size=input_size,
                     seed=seed, weights_path=raw.pop("weights_path", None),
                     output_path=raw.pop("output_path", None))


def _parse_scalar(value: str, kind, key: str):
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key} must be a {kind.__name__}") from None


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def read_raw_image(path, size: int) -> np.ndarray:
    """Raw little-endian float32 image, 3 x size x size, no header."""
    data = np.fromfile(path, dtype="<f4")
    expected = 3 * size * size
    if data.size != expected:
        raise ConfigError(f"raw image holds {data.size} floats, "
                          f"expected {expected} for 3x{size}x{size}")
    return data.astype(np.float64).reshape(3, size, size)


def random_image(seed: int, size: int) -> np.ndarray:
    return np.random.default_rng(np.uint64(seed)).standard_normal((3, size, size))


# ---------------------------------------------------------------------------
# subcommands


def _cmd_describe(args) -> int:
    run = load_config(args.config)
    count = param_count(run.model)
    report = analysis.flop_count(run.model, (run.input_size, run.input_size))
    print(f"variant: {run.variant}")
    print(f"parameters: {count} ({count / 1e6:.2f} M)")
    print(f"flops@{run.input_size}x{run.input_size}: {report.total} "
          f"({report.giga:.2f} G, 1 MAC = 1 FLOP)")
    for name, macs in report.grouped(depth=2):
        print(f"  {name:<24} {macs}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            report.write_csv(fh)
    return 0


def _load_store(args, run: RunConfig) -> WeightStore:
    path = args.weights or run.weights_path
    if path:
        return load_weights(path)
    return init_weights(run.model, run.seed)


def _cmd_forward(args) -> int:
    run = load_config(args.config)
    store = _load_store(args, run)
    if args.input:
        img = read_raw_image(args.input, run.input_size)
    else:
        img = random_image(args.random if args.random is not None else run.seed,
                           run.input_size)
    logits = forward(img, run.model, store)
    out_path = args.out or run.output_path
    fh = open(out_path, "w", newline="") if out_path else sys.stdout
    try:
        fh.write("index,logit\n")
        for i, value in enumerate(logits):
            fh.write(f"{i},{float(value)!r}\n")
    finally:
        if out_path:
            fh.close()
    return 0


def _cmd_equiv_check(args) -> int:
    rng = np.random.default_rng(np.uint64(args.seed))
    q, k, v = (rng.standard_normal((args.n, args.d)) for _ in range(3))
    cfg = AttentionConfig(num_heads=1, head_dim=args.d, feature_map="relu",
                          clamp_floor=args.clamp_floor, scale_s=args.scale)
    diff = float(np.abs(linear_attention_direct(q, k, v, cfg)
                        - linear_attention_factored(q, k, v, cfg)).max())
    print(f"max-abs direct/factored difference: {diff:.3e} "
          f"(n={args.n} d={args.d} seed={args.seed})")
    return 0 if diff <= EQUIV_TOLERANCE else 2


def _cmd_gradcheck(args) -> int:
    target = {"attn": "attn", "lcm": "lcm", "cpe": "cpe", "block": "block"}[args.target]
    err = analysis.grad_check(target, seed=args.seed)
    tol = analysis.GRAD_TOLERANCES[target]
    print(f"gradcheck {args.target}: max relative error {err:.3e} "
          f"(tolerance {tol:.0e})")
    return 0 if err <= tol else 2


def _cmd_bench(args) -> int:
    n_list = sorted(args.n_list)
    rows = analysis.bench_orders(n_list, d=args.d, repetitions=args.reps,
                                 seed=args.seed)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        analysis.write_bench_csv(rows, fh)
    finally:
        if args.out:
            fh.close()
    if len(rows) >= 2:
        direct_slope, factored_slope = analysis.top_decade_slopes(rows)
        print(f"top-decade log-log slopes: direct {direct_slope:.2f}, "
              f"factored {factored_slope:.2f}", file=sys.stderr)
    return 0


def _cmd_clamp_sweep(args) -> int:
    rows = analysis.clamp_sweep(args.values, seed=args.seed)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        analysis.write_clamp_csv(rows, fh)
    finally:
        if args.out:
            fh.close()
    return 0


def _cmd_attnmap(args) -> int:
    run = load_config(args.config)
    store = _load_store(args, run)
    if args.input:
        img = read_raw_image(args.input, run.input_size)
    else:
        img = random_image(args.random if args.random is not None else run.seed,
                           run.input_size)
    stats = analysis.concentration_stats(run.model, store, img)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    matrix_store = WeightStore(stats.matrices)
    save_weights(matrix_store, out_dir / "attention_maps.l2vt")
    with open(out_dir / "concentration.csv", "w", newline="") as fh:
        stats.write_csv(fh)
    print(f"wrote {len(stats.matrices)} attention maps and stats to {out_dir}")
    return 0


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; remap to 1 so that 2
    stays reserved for tolerance failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _float_list(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="l2vit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("describe", help="print parameter count and FLOP report")
    p.add_argument("--config", required=True)
    p.add_argument("--csv", help="also write the per-layer FLOP table here")
    p.set_defaults(fn=_cmd_describe)

    p = sub.add_parser("forward", help="run one image and emit logits CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", help="weight file (default: config path or seeded init)")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--input", help="raw little-endian f32 image, 3xHxW")
    group.add_argument("--random", type=int, help="seed for a random input image")
    p.add_argument("--out", help="logits CSV path (default stdout)")
    p.set_defaults(fn=_cmd_forward)

    p = sub.add_parser("equiv-check",
                       help="max-abs difference between evaluation orders")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clamp-floor", type=float, default=1e-6)
    p.add_argument("--scale", type=float, default=1.0)
    p.set_defaults(fn=_cmd_equiv_check)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--target", choices=("attn", "lcm", "cpe", "block"),
                   required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("bench", help="time direct vs factored attention")
    p.add_argument("--orders", action="store_true",
                   help="benchmark both evaluation orders (the default mode)")
    p.add_argument("--n-list", type=_int_list, required=True)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--reps", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("clamp-sweep", help="denominator floor sweep")
    p.add_argument("--values", type=_float_list, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(fn=_cmd_clamp_sweep)

    p = sub.add_parser("attnmap", help="export attention maps and stats")
    p.add_argument("--config", required=True)
    p.add_argument("--weights")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--input")
    group.add_argument("--random", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_attnmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (ConfigError, WeightFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
