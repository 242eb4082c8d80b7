#!/usr/bin/env python3
"""Sweep the attention denominator floor over a fixed forward pass and
report max activations plus divergence from the default-floor reference."""
import argparse
import sys

from l2vit import analysis


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--values", default="1e-6,1e-1,1,1e1,1e2,1e3,1e9")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None, help="CSV path (default stdout)")
    args = parser.parse_args()

    rows = analysis.clamp_sweep([float(v) for v in args.values.split(",")],
                                seed=args.seed)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        analysis.write_clamp_csv(rows, fh)
    finally:
        if args.out:
            fh.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
