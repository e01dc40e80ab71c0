"""Smoothed mask and mining ratio curves for every cell of an ablation directory.

    python3 scripts/mask_ratio_curves.py --runs runs/thresholds --window 100
"""
import argparse
from collections import defaultdict
from pathlib import Path

import numpy as np

from corrmatch import harness as H
from corrmatch.plots import line_plot


def smooth(x, window):
    x = np.asarray(x, dtype=float)
    if window <= 1 or len(x) < window:
        return x
    c = np.cumsum(np.insert(x, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", required=True, help="ablation output directory (holds cells/)")
    ap.add_argument("--window", type=int, default=100)
    args = ap.parse_args()
    curves = defaultdict(lambda: defaultdict(list))
    for cell in sorted((Path(args.runs) / "cells").iterdir()):
        name = cell.name.rsplit("__seed", 1)[0]
        diag = H.read_csv(cell / "diagnostics.csv")
        for key in ("mask_ratio", "mining_ratio"):
            curves[key][name].append([float(r[key]) for r in diag])
    for key, by in curves.items():
        series = {}
        for name, runs in by.items():
            raw = np.mean(runs, axis=0)
            k = max(1, len(raw) // 10)
            y = smooth(raw, args.window)
            series[name] = (list(range(len(y))), list(y))
            print(f"{key:<13} {name:<40} first10% {raw[:k].mean():.3f}  last10% {raw[-k:].mean():.3f}")
        line_plot(Path(args.runs) / f"{key}.svg", f"{key} (window {args.window})", series)


if __name__ == "__main__":
    main()
