"""Reports, the masking/consistency ablation grid and corruption curves."""
import csv
import dataclasses
import io
import json
import math
import os
import re
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Normalizer, PreparedData, WindowSet
from .metrics import compute_metrics
from .model import ConfigError, FTimeXer, ModelConfig, save_checkpoint
from .training import TrainConfig, fit

__all__ = [
    "EvalReport",
    "AblationCell",
    "default_grid",
    "evaluate",
    "predict_physical",
    "run_ablation_grid",
    "corrupt_exogenous",
    "robustness_eval",
    "degradation_gap",
    "format_table",
    "write_reports_csv",
    "write_curve_csv",
    "REPORT_COLUMNS",
    "MISSING_LEVELS",
    "SHIFTS",
]

MISSING_LEVELS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
SHIFTS = (0, 1, 2)
REPORT_COLUMNS = ("label", "seed", "r2", "mse", "rmse", "mae", "n_test", "config_hash",
                  "freq_branch", "robust", "p", "lam", "split", "wall_ms")


@dataclass
class EvalReport:
    """Metrics in physical units plus the run tags needed to read them."""

    r2: float | None
    mse: float
    rmse: float
    mae: float
    n_test: int
    config_hash: str
    seed: int
    tags: dict
    label: str = ""
    split: str = "test"
    wall_ms: float = 0.0

    def row(self):
        t = self.tags
        return [self.label, self.seed, self.r2, self.mse, self.rmse, self.mae, self.n_test, self.config_hash,
                t.get("freq_branch"), t.get("robust"), t.get("p"), t.get("lam"), self.split, self.wall_ms]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def metrics_key(self):
        """Everything except timing, for reproducibility comparisons."""
        d = self.to_dict()
        d.pop("wall_ms")
        return d


def _tags(cfg: ModelConfig):
    robust = bool(cfg.robust_training_on and cfg.n_exo)
    return {
        "freq_branch": bool(cfg.freq_branch_on),
        "robust": robust,
        "consistency": bool(robust and cfg.consistency_on),
        "p": cfg.mask_p if robust else 0.0,
        "lam": cfg.cons_weight if robust and cfg.consistency_on else 0.0,
        "exo_agg": cfg.exo_agg,
        "fusion": cfg.fusion,
        "loss": cfg.loss_kind,
    }


def predict_physical(model: FTimeXer, ws: WindowSet, normalizer: Normalizer, x_exo=None):
    """Return ``(truth, prediction)`` in physical units, shape (n, d_e)."""
    x_exo = ws.x_exo if x_exo is None else x_exo
    pred = model.predict(ws.x_endo, x_exo)
    return normalizer.inverse_endo(ws.y), normalizer.inverse_endo(pred)


def evaluate(model: FTimeXer, ws: WindowSet, normalizer: Normalizer, label="", split="test",
             x_exo=None) -> EvalReport:
    t0 = time.perf_counter()
    truth, pred = predict_physical(model, ws, normalizer, x_exo)
    m = compute_metrics(truth, pred)
    return EvalReport(
        r2=m.r2, mse=m.mse, rmse=m.rmse, mae=m.mae, n_test=len(ws), config_hash=model.cfg.digest(),
        seed=model.seed, tags=_tags(model.cfg), label=label, split=split,
        wall_ms=round((time.perf_counter() - t0) * 1000.0, 3),
    )


# --------------------------------------------------------------- ablation grid


@dataclass(frozen=True)
class AblationCell:
    label: str
    overrides: dict = field(default_factory=dict)

    @property
    def slug(self):
        return re.sub(r"[^a-z0-9]+", "-", self.label.lower()).strip("-")

    def apply(self, base: ModelConfig) -> ModelConfig:
        try:
            return base.replace(**self.overrides)
        except TypeError as exc:
            raise ConfigError(f"ablation cell {self.label!r}: {exc}") from exc


def default_grid(base: ModelConfig, include_no_freq_baseline=False, mask_levels=(0.1, 0.2, 0.3, 0.4, 0.5),
                 full_p=0.3):
    """Baseline, mask-only rows and the full masking + consistency row."""
    cells = [AblationCell("Baseline", {"robust_training_on": False})]
    if include_no_freq_baseline:
        cells.append(AblationCell("Baseline (no frequency branch)",
                                  {"robust_training_on": False, "freq_branch_on": False}))
    for p in mask_levels:
        cells.append(AblationCell(f"Masking {round(p * 100)}%",
                                  {"robust_training_on": True, "consistency_on": False, "mask_p": p}))
    cells.append(AblationCell("FTimeXer", {"robust_training_on": True, "consistency_on": True, "mask_p": full_p,
                                           "cons_weight": base.cons_weight}))
    return cells


def _run_cell(data: PreparedData, cfg: ModelConfig, train_cfg: TrainConfig, label, run_dir):
    log_path = os.path.join(run_dir, "train_log.jsonl") if run_dir else None
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
    result = fit(data.train, cfg, train_cfg, log_path=log_path)
    report = evaluate(result.model, data.test, data.normalizer, label=label)
    if run_dir:
        save_checkpoint(os.path.join(run_dir, "checkpoint.ftx"), result.model)
    return report, result.log


def run_ablation_grid(data: PreparedData, base_cfg: ModelConfig, train_cfg: TrainConfig = TrainConfig(),
                      grid=None, seeds=(0, 1, 2), out_dir=None, workers=1, on_run=None):
    """Train and score every (cell, seed) pair.

    With ``out_dir`` each finished run leaves ``cells/<slug>/seed<k>/report.json``;
    rerunning skips pairs whose marker exists. Returns ``(reports, aggregates)``
    where ``aggregates`` holds one seed-averaged report per cell, in grid order.
    """
    grid = default_grid(base_cfg) if grid is None else grid
    jobs = []
    reports = {}
    for cell in grid:
        cfg = cell.apply(base_cfg)
        for seed in seeds:
            run_dir = os.path.join(out_dir, "cells", cell.slug, f"seed{seed}") if out_dir else None
            marker = os.path.join(run_dir, "report.json") if run_dir else None
            if marker and os.path.exists(marker):
                with open(marker, encoding="utf-8") as fh:
                    reports[(cell.label, seed)] = EvalReport.from_dict(json.load(fh))
                continue
            jobs.append((cell, cfg, seed, run_dir, marker))

    def finish(cell, seed, marker, report, log):
        reports[(cell.label, seed)] = report
        if marker:
            tmp = marker + ".tmp"
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(report.to_dict(), fh, sort_keys=True)
            os.replace(tmp, marker)
        if on_run:
            on_run(cell, seed, report, log)

    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                (job, pool.submit(_run_cell, data, job[1], dataclasses.replace(train_cfg, seed=job[2]),
                                  job[0].label, job[3]))
                for job in jobs
            ]
            for (cell, _, seed, _, marker), fut in futures:
                finish(cell, seed, marker, *fut.result())
    else:
        for cell, cfg, seed, run_dir, marker in jobs:
            report, log = _run_cell(data, cfg, dataclasses.replace(train_cfg, seed=seed), cell.label, run_dir)
            finish(cell, seed, marker, report, log)

    ordered = [reports[(cell.label, s)] for cell in grid for s in seeds]
    aggregates = [_aggregate([reports[(cell.label, s)] for s in seeds], cell.label) for cell in grid]
    if out_dir:
        write_reports_csv(os.path.join(out_dir, "ablation.csv"), ordered, aggregates)
        with open(os.path.join(out_dir, "ablation.txt"), "w", encoding="utf-8") as fh:
            fh.write(format_table(aggregates) + "\n")
    return ordered, aggregates


def _aggregate(reports, label):
    r2s = [r.r2 for r in reports]
    first = reports[0]
    return EvalReport(
        r2=None if any(v is None for v in r2s) else float(np.mean(r2s)),
        mse=float(np.mean([r.mse for r in reports])),
        rmse=float(np.mean([r.rmse for r in reports])),
        mae=float(np.mean([r.mae for r in reports])),
        n_test=first.n_test,
        config_hash=first.config_hash,
        seed=-1,
        tags=dict(first.tags, n_seeds=len(reports)),
        label=label,
        split=first.split,
        wall_ms=float(np.sum([r.wall_ms for r in reports])),
    )


# ----------------------------------------------------------------- robustness


def corrupt_exogenous(x_exo, missing_frac=0.0, shift=0, rng=None):
    """Zero a random fraction of exogenous cells and/or roll them ``shift`` steps in time.

    Inputs are normalised, so zero is the training mean. The roll is circular
    within each window.
    """
    x = np.array(x_exo, dtype=np.float64)
    if shift:
        x = np.roll(x, shift, axis=1)
    if missing_frac > 0:
        if not 0.0 <= missing_frac <= 1.0:
            raise ValueError("missing_frac must lie in [0, 1]")
        rng = np.random.default_rng(0) if rng is None else rng
        x = np.where(rng.random(x.shape) < missing_frac, 0.0, x)
    return x


def robustness_eval(model: FTimeXer, ws: WindowSet, normalizer: Normalizer, missing_levels=MISSING_LEVELS,
                    shifts=SHIFTS, seed=0):
    """Metrics under exogenous missingness and misalignment.

    Returns a list of dicts with keys ``kind`` ('missing' or 'shift'),
    ``level`` and the four metrics.
    """
    rows = []
    for kind, levels in (("missing", missing_levels), ("shift", shifts)):
        for level in levels:
            rng = np.random.default_rng([seed, int(round(float(level) * 1000))])
            if kind == "missing":
                x = corrupt_exogenous(ws.x_exo, missing_frac=level, rng=rng)
            else:
                x = corrupt_exogenous(ws.x_exo, shift=int(level))
            rep = evaluate(model, ws, normalizer, x_exo=x)
            rows.append({"kind": kind, "level": level, "r2": rep.r2, "mse": rep.mse, "rmse": rep.rmse,
                         "mae": rep.mae})
    return rows


def degradation_gap(robust_curve, plain_curve):
    """Per corruption level: MSE increase of each model over its own clean score."""
    def base(curve):
        return next(r["mse"] for r in curve if r["kind"] == "missing" and r["level"] == 0)

    b_r, b_p = base(robust_curve), base(plain_curve)
    out = []
    for r, p in zip(robust_curve, plain_curve):
        if (r["kind"], r["level"]) != (p["kind"], p["level"]):
            raise ValueError("curves were evaluated at different corruption levels")
        d_r, d_p = r["mse"] - b_r, p["mse"] - b_p
        out.append({"kind": r["kind"], "level": r["level"], "robust_increase": d_r, "plain_increase": d_p,
                    "gap": d_p - d_r})
    return out


# -------------------------------------------------------------------- output


def _fmt(v, digits=3):
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.{digits}f}"
    return str(v)


def format_table(reports, title_col="Setting"):
    """Plain-text table with columns R², MSE, RMSE, MAE."""
    header = [title_col, "R²", "MSE", "RMSE", "MAE"]
    rows = [[r.label, _fmt(r.r2), _fmt(r.mse), _fmt(r.rmse), _fmt(r.mae)] for r in reports]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
    return "\n".join(lines)


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_reports_csv(path, reports, aggregates=()):
    """One row per run, then one ``kind=aggregate`` row per cell."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("kind",) + REPORT_COLUMNS)
        for r in reports:
            w.writerow(["run"] + [_csv_cell(v) for v in r.row()])
        for r in aggregates:
            w.writerow(["aggregate"] + [_csv_cell(v) for v in r.row()])


def write_curve_csv(path, rows):
    if not rows:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _csv_cell(v) for k, v in row.items()})
