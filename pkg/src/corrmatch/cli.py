"""Command line entry point: ``generate``, ``train``, ``ablate`` and ``simulate-threshold``.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as D
from . import harness as H
from .config import load_config
from .errors import ConfigError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _read_json(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return raw


def cmd_generate(config_path, out=None) -> Path:
    cfg = load_config(config_path)
    path = Path(out or cfg.dataset_path or Path(cfg.out_dir) / "dataset.cmds")
    spec = cfg.dataset_spec()
    labeled, unlabeled = D.generate(spec)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        D.save(path, spec, labeled, unlabeled)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from exc
    return path


def cmd_train(config_path, out=None) -> Path:
    cfg = load_config(config_path)
    result = H.train(cfg, out)
    return result.out_dir


def cmd_ablate(config_path, sweep_path, out=None) -> list[dict]:
    cfg = load_config(config_path)
    return H.ablate(cfg, _read_json(sweep_path), out)


def cmd_simulate_threshold(spec_path, out=None) -> list[dict]:
    spec = _read_json(spec_path)
    if out:
        spec["output"] = str(out)
    spec.setdefault("output", "threshold_trajectories.csv")
    return H.simulate_threshold(spec)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="corrmatch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset file")
    g.add_argument("--config", required=True)
    g.add_argument("--out", help="dataset path (default: dataset_path or <out_dir>/dataset.cmds)")

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="run directory (default: out_dir from the config)")

    a = sub.add_parser("ablate", help="run a threshold x variant x seed sweep")
    a.add_argument("--config", required=True)
    a.add_argument("--sweep", required=True)
    a.add_argument("--out")

    s = sub.add_parser("simulate-threshold", help="EMA threshold trajectories on synthetic streams")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", help="CSV path (overrides the spec's output)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "generate":
            print(cmd_generate(args.config, args.out))
        elif args.command == "train":
            print(cmd_train(args.config, args.out))
        elif args.command == "ablate":
            rows = cmd_ablate(args.config, args.sweep, args.out)
            failed = sum(r["status"] != "ok" for r in rows)
            print(f"{len(rows)} cells, {failed} failed")
        else:
            rows = cmd_simulate_threshold(args.spec, args.out)
            print(f"{len(rows)} trajectory rows")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
