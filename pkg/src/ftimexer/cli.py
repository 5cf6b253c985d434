"""Generate data, train, evaluate and ablate FTimeXer forecasters from the command line.

Exit codes: 0 success, 2 usage or configuration problem, 3 numerical failure.
"""
import argparse
import csv
import json
import logging
import os
import sys

from . import config as rc
from .data import Normalizer, SchemaError, OrderingError, SynthSpec, synth_generate, write_csv
from .evaluation import (default_grid, AblationCell, degradation_gap, evaluate, format_table, predict_physical,
                         robustness_eval, run_ablation_grid, write_curve_csv, write_reports_csv)
from .model import ConfigError, load_checkpoint, save_checkpoint
from .training import TrainingDiverged, fit

log = logging.getLogger("ftimexer")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _out_dir(args, cfg, command):
    out = args.out or cfg.get("out_dir")
    if not out:
        out = os.path.join(os.environ.get("FTX_OUT_DIR", "runs"), command)
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_cfg(args):
    cfg = rc.load_run_config(getattr(args, "config", None))
    cfg = rc.apply_overrides(cfg, getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
    return cfg


# ------------------------------------------------------------------- commands


def cmd_synth(args):
    cfg = rc.load_run_config(args.config)
    sets = []
    for item in args.set or ():
        key = item.split("=", 1)[0]
        sets.append(item if key.startswith("data.") else f"data.synth.{item}")
    cfg = rc.apply_overrides(cfg, sets)
    synth = dict(cfg["data"].get("synth") or {})
    if args.seed is not None:
        synth["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(synth)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"data.synth: {exc}") from exc
    out = _out_dir(args, cfg, "synth")
    raw = synth_generate(spec)
    csv_path = os.path.join(out, "synth.csv")
    write_csv(raw, csv_path)
    _write_json(os.path.join(out, "synth_truth.json"), raw.ground_truth)
    _write_json(os.path.join(out, "manifest.json"), {
        "csv_path": "synth.csv", "timestamp_col": "timestamp", "endo_cols": list(raw.endo_cols),
        "exo_cols": list(raw.exo_cols), "lookback": 12, "horizon": 1, "train_frac": 0.8,
    })
    _write_json(os.path.join(out, "resolved_config.json"), {"data": {"synth": spec.to_dict()}})
    print(f"wrote {len(raw)} rows to {csv_path}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_cfg(args)
    data = rc.build_data(cfg)
    model_cfg = rc.resolve_model_config(cfg, data)
    train_cfg = rc.resolve_train_config(cfg)
    out = _out_dir(args, cfg, "train")
    resolved = dict(cfg, model=model_cfg.to_dict(), train=train_cfg.to_dict(), out_dir=out)
    _write_json(os.path.join(out, "resolved_config.json"), resolved)
    result = fit(data.train, model_cfg, train_cfg, log_path=os.path.join(out, "train_log.jsonl"))
    meta = {
        "normalizer": data.normalizer.to_dict(),
        "run_config": {k: resolved[k] for k in ("data", "model", "train")},
        "best_epoch": result.best_epoch,
        "best_val_mse": result.best_val,
        "horizon": data.horizon,
    }
    save_checkpoint(os.path.join(out, "checkpoint.ftx"), result.model, meta)
    report = evaluate(result.model, data.test, data.normalizer, label="test")
    print(format_table([report]))
    print(f"checkpoint: {os.path.join(out, 'checkpoint.ftx')} (best epoch {result.best_epoch})")
    return EXIT_OK


def _load_for_eval(args):
    model, meta = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = _load_cfg(args)
    else:
        cfg = rc.apply_overrides(rc.load_run_config(None), getattr(args, "set", None))
        cfg["data"] = meta["run_config"]["data"]
    cfg["model"] = dict(cfg["model"], lookback=model.cfg.lookback)
    norm = Normalizer.from_dict(meta["normalizer"]) if "normalizer" in meta else None
    data = rc.build_data(cfg, normalizer=norm, lookback=model.cfg.lookback)
    if (data.n_endo, data.n_exo) != (model.cfg.n_endo, model.cfg.n_exo):
        raise UsageError(
            f"checkpoint expects {model.cfg.n_endo} endogenous / {model.cfg.n_exo} exogenous columns, "
            f"dataset has {data.n_endo} / {data.n_exo}"
        )
    return model, meta, cfg, data


def _snapshot(out, cfg, model, checkpoint):
    resolved = dict(cfg, model=model.cfg.to_dict(), checkpoint=os.path.abspath(checkpoint), out_dir=out)
    _write_json(os.path.join(out, "resolved_config.json"), resolved)


def _plot_svg(path, times, truth, pred, title):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "ftimexer"  # stable element ids across runs
    fig, ax = plt.subplots(figsize=(10, 3.5))
    ax.plot(times, truth, color="tab:blue", lw=1.0, label="ground truth")
    ax.plot(times, pred, color="tab:red", lw=1.0, label="prediction")
    ax.set_title(title)
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_eval(args):
    model, meta, cfg, data = _load_for_eval(args)
    ws = data.train if args.split == "train" else data.test
    out = _out_dir(args, cfg, "eval")
    _snapshot(out, cfg, model, args.checkpoint)
    suffix = args.split
    report = evaluate(model, ws, data.normalizer, label=f"{suffix}", split=suffix)
    write_reports_csv(os.path.join(out, f"report_{suffix}.csv"), [report])
    table = format_table([report], title_col="Split")
    with open(os.path.join(out, f"report_{suffix}.txt"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    truth, pred = predict_physical(model, ws, data.normalizer)
    times = data.target_times(ws)
    cols = list(data.raw.endo_cols)
    with open(os.path.join(out, f"predictions_{suffix}.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp"] + [f"{c}_true" for c in cols] + [f"{c}_pred" for c in cols])
        for t, a, b in zip(times, truth, pred):
            w.writerow([str(t)] + [repr(float(v)) for v in a] + [repr(float(v)) for v in b])
    if args.plot:
        _plot_svg(os.path.join(out, f"predictions_{suffix}.svg"), times.astype("datetime64[s]").astype(object),
                  truth[:, 0], pred[:, 0], f"{cols[0]} ({suffix})")
    print(table)
    return EXIT_OK


def _load_grid(path, base_cfg, include_no_freq):
    if not path:
        return default_grid(base_cfg, include_no_freq_baseline=include_no_freq)
    with open(path, encoding="utf-8") as fh:
        spec = json.load(fh)
    try:
        return [AblationCell(c["label"], dict(c.get("overrides", {}))) for c in spec]
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"{path}: grid must be a list of {{label, overrides}} objects") from exc


def cmd_ablate(args):
    cfg = _load_cfg(args)
    data = rc.build_data(cfg)
    base = rc.resolve_model_config(cfg, data)
    train_cfg = rc.resolve_train_config(cfg)
    abl = cfg["ablation"]
    n_seeds = args.seeds if args.seeds is not None else int(abl.get("seeds", 3))
    if n_seeds < 1:
        raise ConfigError("ablation.seeds must be at least 1")
    seeds = [train_cfg.seed + i for i in range(n_seeds)]
    grid = _load_grid(args.grid, base, bool(abl.get("include_no_freq_baseline", False)))
    for cell in grid:
        cell.apply(base)  # surfaces bad override names before any training
    out = _out_dir(args, cfg, "ablate")
    _write_json(os.path.join(out, "resolved_config.json"),
                dict(cfg, model=base.to_dict(), train=train_cfg.to_dict(), out_dir=out))

    def progress(cell, seed, report, _log):
        print(f"  {cell.label:<32} seed {seed}: mse {report.mse:.4f}", flush=True)

    _, aggregates = run_ablation_grid(data, base, train_cfg, grid, seeds, out_dir=out,
                                      workers=int(abl.get("workers", 1)), on_run=progress)
    print(format_table(aggregates))
    return EXIT_OK


def cmd_robustness(args):
    model, meta, cfg, data = _load_for_eval(args)
    out = _out_dir(args, cfg, "robustness")
    _snapshot(out, cfg, model, args.checkpoint)
    rb = cfg["robustness"]
    levels = [float(v) for v in rb.get("missing_levels", [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])]
    shifts = [int(v) for v in rb.get("shifts", [0, 1, 2])]
    seed = int(cfg["train"].get("seed", 0))
    curve = robustness_eval(model, data.test, data.normalizer, levels, shifts, seed=seed)
    write_curve_csv(os.path.join(out, "robustness.csv"), curve)
    if args.compare:
        other, _ = load_checkpoint(args.compare)
        if (other.cfg.n_endo, other.cfg.n_exo) != (model.cfg.n_endo, model.cfg.n_exo):
            raise UsageError("comparison checkpoint has different input dimensions")
        curve_b = robustness_eval(other, data.test, data.normalizer, levels, shifts, seed=seed)
        write_curve_csv(os.path.join(out, "robustness_compare.csv"), curve_b)
        write_curve_csv(os.path.join(out, "degradation_gap.csv"), degradation_gap(curve, curve_b))
    for row in curve:
        print(f"{row['kind']:<8} {row['level']:>5}  mse {row['mse']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(prog="ftimexer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="run configuration JSON")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--out", help="output directory (default $FTX_OUT_DIR/<command>)")

    p = sub.add_parser("synth", help="write a synthetic dataset CSV plus ground-truth sidecar")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write checkpoint, log and resolved config")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint and write report and prediction CSVs")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--plot", action="store_true", help="also write an SVG of truth vs prediction")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the masking / consistency ablation grid (resumable)")
    common(p)
    p.add_argument("--seeds", type=int, help="number of seeds per cell")
    p.add_argument("--grid", help="JSON list of {label, overrides} cells")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("robustness", help="metrics under exogenous missingness and misalignment")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--compare", help="second checkpoint for a degradation-gap table")
    p.set_defaults(func=cmd_robustness)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, SchemaError, OrderingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
