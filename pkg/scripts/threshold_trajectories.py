"""Threshold trajectories from several initial values on shared synthetic streams.

Prints the largest pairwise gap at a few checkpoints and writes one SVG per stream.

    python3 scripts/threshold_trajectories.py --spec configs/simulate.json
"""
import argparse
import json
from collections import defaultdict
from pathlib import Path

from corrmatch import harness as H
from corrmatch.plots import line_plot

CHECKPOINTS = (1, 100, 500, 1000, 2000, 3000, 5000)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--spec", default="configs/simulate.json")
    ap.add_argument("--plots", default="runs/threshold_plots")
    args = ap.parse_args()
    spec = json.loads(Path(args.spec).read_text())
    if spec.get("output"):
        Path(spec["output"]).parent.mkdir(parents=True, exist_ok=True)
    rows = H.simulate_threshold(spec)
    traj = defaultdict(lambda: defaultdict(list))
    for r in rows:
        traj[r["stream"]][r["tau0"]].append(r["tau"])
    Path(args.plots).mkdir(parents=True, exist_ok=True)
    for stream, by in traj.items():
        n = len(next(iter(by.values())))
        gaps = [max(t[i] for t in by.values()) - min(t[i] for t in by.values()) for i in range(n)]
        shown = ", ".join(f"{c}: {gaps[c - 1]:.4f}" for c in CHECKPOINTS if c <= n)
        print(f"{stream:<10} max gap after k updates  {shown}")
        xs = list(range(1, n + 1))
        line_plot(Path(args.plots) / f"{stream}.svg", f"tau, {stream} stream",
                  {f"tau0={t0:g}": (xs, v) for t0, v in by.items()}, xlabel="update")


if __name__ == "__main__":
    main()
