"""Run a sweep and print per-(variant, threshold) means over seeds.

    python3 scripts/ablation_table.py --config configs/default.json \
        --sweep configs/sweep_components.json --out runs/components
"""
import argparse
import json
import logging
from collections import defaultdict
from pathlib import Path

import numpy as np

from corrmatch import harness as H
from corrmatch.config import load_config

COLS = ("final_val_miou", "mean_mining_ratio", "mean_mask_ratio", "mean_tau")


def table(rows):
    groups = defaultdict(list)
    for r in rows:
        if r["status"] == "ok":
            groups[(r["variant"], r["threshold"])].append(r)
    print(f"{'variant':<12} {'threshold':<18} {'n':>2} " + " ".join(f"{c:>18}" for c in COLS))
    for (v, t), rs in groups.items():
        cells = []
        for c in COLS:
            vals = np.array([float(r[c]) for r in rs])
            cells.append(f"{vals.mean():.4f} ± {vals.std():.4f}")
        print(f"{v:<12} {t:<18} {len(rs):>2} " + " ".join(f"{c:>18}" for c in cells))
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        print(f"failed: {r['variant']} {r['threshold']} seed {r['seed']}: {r['status']}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/default.json")
    ap.add_argument("--sweep", required=True)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--reuse", action="store_true", help="only tabulate an existing ablation.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    if args.reuse:
        rows = H.read_csv(Path(args.out) / "ablation.csv")
    else:
        rows = H.ablate(load_config(args.config), json.loads(Path(args.sweep).read_text()), args.out)
    table(rows)


if __name__ == "__main__":
    main()
