"""Experiment runner: deterministic training runs, ablation sweeps and threshold simulations."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import engine as E
from . import metrics
from . import model as M
from .config import RunConfig, from_dict
from .errors import ConfigError, NumericalError
from .plots import line_plot

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "lr", "ls_h", "ls_c", "lu_h", "lu_s", "lu_c", "total", "tau", "val_miou")
DIAG_COLUMNS = ("iteration", "mask_ratio", "mining_ratio", "filter_ratio", "correct_pseudo_ratio", "pixel_accuracy")
SUMMARY_COLUMNS = (
    "variant", "threshold", "seed", "status", "final_val_miou", "mean_mask_ratio", "mean_mining_ratio",
    "mean_filter_ratio", "mean_correct_pseudo_ratio", "mean_pixel_accuracy", "mean_tau",
    "first10_mask_ratio", "last10_mask_ratio",
)


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def write_csv(path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c)) if not isinstance(r.get(c), str) else r.get(c) for c in columns])
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class RunResult:
    metrics: list[dict] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)
    params: M.ModelParams | None = None
    out_dir: Path | None = None
    seconds: float = 0.0


def load_pools(cfg: RunConfig):
    if cfg.dataset_path:
        spec, labeled, unlabeled = D.load(cfg.dataset_path)
    else:
        spec = cfg.dataset_spec()
        labeled, unlabeled = D.generate(spec)
    val = D.generate_val(spec, cfg.n_val)
    return spec, labeled, unlabeled, val


def evaluate(params: M.ModelParams, val_images: np.ndarray, val_labels: np.ndarray, K: int) -> float:
    pred = M.predict(params.frozen(), val_images)
    return metrics.miou(pred, val_labels, K)


def train(cfg: RunConfig, out_dir=None, write: bool = True) -> RunResult:
    """Run ``total_iters`` training steps; writes CSVs, checkpoint and plots when ``write``.

    Randomness comes from three seeded streams (model init, batch sampling,
    step augmentation) so a ``(config, seed)`` pair always reproduces the
    same bytes.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    start = time.perf_counter()
    spec, labeled, unlabeled, val = load_pools(cfg)
    if not unlabeled and cfg.unlabeled_active:
        raise ConfigError("semi-supervised training needs n_unlabeled >= 1")
    val_x = np.stack([s.image for s in val]) if val else None
    val_y = np.stack([s.label for s in val]) if val else None

    params = M.init(cfg.seed, spec.Cin, cfg.D, spec.K, cfg.hidden)
    opt = E.OptState()
    tstate = E.initial_threshold_state(cfg)
    batch_rng = np.random.default_rng([cfg.seed, 1])
    step_rng = np.random.default_rng([cfg.seed, 2])
    result = RunResult(out_dir=out)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    for it in range(cfg.total_iters):
        li = batch_rng.integers(0, len(labeled), size=cfg.batch_labeled)
        n_u = max(len(unlabeled), 1)
        ui = batch_rng.choice(n_u, size=min(cfg.batch_unlabeled, n_u), replace=False)
        lb = [labeled[i] for i in li]
        ub = [unlabeled[i] for i in ui] if unlabeled else lb
        try:
            params, opt, tstate, bd, diag, lr = E.train_step(params, opt, tstate, lb, ub, step_rng, cfg, it)
        except NumericalError as exc:
            if write:
                dump = {"iteration": it, "error": str(exc), "terms": exc.details}
                (out / "numerical_abort.json").write_text(json.dumps(dump, indent=2, default=repr) + "\n")
                _write_outputs(cfg, out, result, params)
            raise
        row = {"iteration": it, "lr": lr, **bd.values(), "tau": diag.tau, "val_miou": None}
        if val_x is not None and ((it + 1) % cfg.eval_interval == 0 or it == cfg.total_iters - 1):
            row["val_miou"] = evaluate(params, val_x, val_y, spec.K)
            log.info("iter %d  total %.4f  tau %.4f  val mIoU %.4f", it, row["total"], diag.tau, row["val_miou"])
        result.metrics.append(row)
        result.diagnostics.append({c: getattr(diag, c) for c in DIAG_COLUMNS})
    result.params = params
    result.seconds = time.perf_counter() - start
    if write:
        _write_outputs(cfg, out, result, params)
    return result


def _write_outputs(cfg: RunConfig, out: Path, result: RunResult, params: M.ModelParams) -> None:
    write_csv(out / "metrics.csv", METRIC_COLUMNS, result.metrics)
    write_csv(out / "diagnostics.csv", DIAG_COLUMNS, result.diagnostics)
    M.save_checkpoint(out / "checkpoint.cmpt", params)
    if cfg.plots and result.metrics:
        write_plots(out / "plots", result.metrics, result.diagnostics)


def write_plots(plot_dir: Path, rows: list[dict], diag: list[dict]) -> None:
    plot_dir.mkdir(parents=True, exist_ok=True)
    xs = [r["iteration"] for r in rows]
    line_plot(plot_dir / "losses.svg", "loss terms",
              {k: (xs, [r[k] for r in rows]) for k in ("ls_h", "ls_c", "lu_h", "lu_s", "lu_c", "total")})
    line_plot(plot_dir / "tau.svg", "confidence threshold", {"tau": (xs, [r["tau"] for r in rows])})
    dx = [r["iteration"] for r in diag]
    line_plot(plot_dir / "ratios.svg", "mask / mining ratio",
              {k: (dx, [r[k] for r in diag]) for k in ("mask_ratio", "mining_ratio")})
    ev = [r for r in rows if r["val_miou"] is not None]
    line_plot(plot_dir / "val_miou.svg", "validation mIoU",
              {"val_miou": ([r["iteration"] for r in ev], [r["val_miou"] for r in ev])})


def _num(v):
    if v is None or v == "":
        return None
    return float(v)


def summarize(metric_rows: list[dict], diag_rows: list[dict]) -> dict:
    """Final validation mIoU and diagnostics averaged over the last 25% of iterations."""
    n = len(diag_rows)
    tail = diag_rows[n - max(1, math.ceil(0.25 * n)):]
    mtail = metric_rows[len(metric_rows) - max(1, math.ceil(0.25 * len(metric_rows))):]
    head10 = diag_rows[: max(1, math.ceil(0.1 * n))]
    tail10 = diag_rows[n - max(1, math.ceil(0.1 * n)):]

    def mean(rows, key):
        vals = [_num(r[key]) for r in rows]
        vals = [v for v in vals if v is not None and math.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")

    evals = [_num(r["val_miou"]) for r in metric_rows if _num(r["val_miou"]) is not None]
    return {
        "final_val_miou": evals[-1] if evals else float("nan"),
        "mean_mask_ratio": mean(tail, "mask_ratio"),
        "mean_mining_ratio": mean(tail, "mining_ratio"),
        "mean_filter_ratio": mean(tail, "filter_ratio"),
        "mean_correct_pseudo_ratio": mean(tail, "correct_pseudo_ratio"),
        "mean_pixel_accuracy": mean(tail, "pixel_accuracy"),
        "mean_tau": mean(mtail, "tau"),
        "first10_mask_ratio": mean(head10, "mask_ratio"),
        "last10_mask_ratio": mean(tail10, "mask_ratio"),
    }


def summarize_dir(run_dir) -> dict:
    run_dir = Path(run_dir)
    return summarize(read_csv(run_dir / "metrics.csv"), read_csv(run_dir / "diagnostics.csv"))


# ---------------------------------------------------------------- ablation sweeps

def parse_threshold(entry) -> dict:
    """``"relaxed_global"``, ``"relaxed_per_class"`` or ``"fixed:0.95"`` -> config overrides."""
    if isinstance(entry, str) and entry.startswith("fixed:"):
        try:
            return {"threshold_mode": "fixed", "fixed_threshold": float(entry.split(":", 1)[1])}
        except ValueError as exc:
            raise ConfigError(f"bad fixed threshold entry {entry!r}") from exc
    if entry in ("relaxed_global", "relaxed_per_class"):
        return {"threshold_mode": entry}
    raise ConfigError(f"unknown threshold entry {entry!r}")


def threshold_label(cfg: RunConfig) -> str:
    return f"fixed:{cfg.fixed_threshold:g}" if cfg.threshold_mode == "fixed" else cfg.threshold_mode


@dataclass(frozen=True)
class Cell:
    variant: str
    threshold: str
    seed: int
    config: RunConfig
    out_dir: str


def expand_sweep(base: RunConfig, sweep: dict, out_dir) -> list[Cell]:
    allowed = {"thresholds", "variants", "seeds", "workers"}
    unknown = sorted(set(sweep) - allowed)
    if unknown:
        raise ConfigError(f"unknown sweep key(s): {', '.join(unknown)}")
    thresholds = sweep.get("thresholds") or [threshold_label(base)]
    variants = sweep.get("variants") or {"base": {}}
    seeds = sweep.get("seeds") or [base.seed]
    if not isinstance(variants, dict):
        raise ConfigError("sweep 'variants' must map names to config overrides")
    cells = []
    for (vname, overrides), th, seed in itertools.product(variants.items(), thresholds, seeds):
        raw = base.to_dict()
        raw.update(overrides)
        raw.update(parse_threshold(th))
        raw["seed"] = int(seed)
        cfg = from_dict(raw, env={})
        label = threshold_label(cfg)
        cell_dir = Path(out_dir) / "cells" / f"{vname}__{label.replace(':', '')}__seed{seed}"
        cells.append(Cell(vname, label, int(seed), cfg, str(cell_dir)))
    return cells


def run_cell(cell: Cell) -> dict:
    row = {"variant": cell.variant, "threshold": cell.threshold, "seed": cell.seed}
    try:
        train(cell.config, cell.out_dir)
        row["status"] = "ok"
    except NumericalError as exc:
        row["status"] = f"numerical_abort: {exc}"
        return row
    row.update(summarize_dir(cell.out_dir))
    return row


def ablate(base: RunConfig, sweep: dict, out_dir=None, workers: int | None = None) -> list[dict]:
    """Run every (variant, threshold, seed) cell and write ``ablation.csv``; failed cells are marked."""
    out = Path(out_dir if out_dir is not None else base.out_dir)
    cells = expand_sweep(base, sweep, out)
    out.mkdir(parents=True, exist_ok=True)
    workers = int(sweep.get("workers", 1) if workers is None else workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(c) for c in cells]
    write_csv(out / "ablation.csv", SUMMARY_COLUMNS, rows)
    return rows


# ---------------------------------------------------------------- threshold simulation

STREAM_KINDS = ("constant", "ramp", "noisy")


def make_stream(kind: str, steps: int, params: dict) -> np.ndarray:
    if kind == "constant":
        s = np.full(steps, float(params.get("value", 0.9)))
    elif kind == "ramp":
        s = np.linspace(float(params.get("start", 0.6)), float(params.get("end", 0.99)), steps)
    elif kind == "noisy":
        rng = np.random.default_rng(int(params.get("seed", 0)))
        s = float(params.get("mean", 0.9)) + float(params.get("std", 0.03)) * rng.standard_normal(steps)
    else:
        raise ConfigError(f"unknown stream kind {kind!r}; expected one of {STREAM_KINDS}")
    return np.clip(s, 0.0, 1.0)


def simulate_threshold(spec: dict) -> list[dict]:
    """Drive the EMA threshold with synthetic increment streams from several initial values.

    ``spec`` keys: ``lambda``, ``steps``, ``tau0s``, ``streams`` (list of
    ``{"kind": ..., ...}``) and optionally ``output``.
    """
    allowed = {"lambda", "steps", "tau0s", "streams", "output"}
    unknown = sorted(set(spec) - allowed)
    if unknown:
        raise ConfigError(f"unknown simulation key(s): {', '.join(unknown)}")
    try:
        lam = float(spec.get("lambda", 0.999))
        steps = int(spec.get("steps", 2000))
        tau0s = [float(t) for t in spec.get("tau0s", [0.75, 0.85, 0.95])]
        streams = spec.get("streams", [{"kind": "constant"}, {"kind": "ramp"}, {"kind": "noisy"}])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid simulation spec: {exc}") from exc
    if steps < 1 or not 0 <= lam < 1 or not all(0 <= t <= 1 for t in tau0s):
        raise ConfigError("need steps >= 1, 0 <= lambda < 1 and every tau0 in [0, 1]")
    rows = []
    for i, st in enumerate(streams):
        if not isinstance(st, dict) or "kind" not in st:
            raise ConfigError(f"stream #{i} must be an object with a 'kind'")
        name = st.get("name", st["kind"])
        values = make_stream(st["kind"], steps, st)
        for tau0 in tau0s:
            state = E.init_threshold(tau0, lam)
            for t, tp in enumerate(values):
                state = E.update_threshold(state, float(tp))
                rows.append({"stream": name, "tau0": tau0, "step": t, "tau_prime": float(tp), "tau": state.tau})
    if spec.get("output"):
        write_csv(spec["output"], ("stream", "tau0", "step", "tau_prime", "tau"), rows)
    return rows
