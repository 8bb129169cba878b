"""Experiment runner CLI: run / report / score subcommands.

run executes the method x seed grid from a JSON config, one record per
cell under <out>/cells/, skipping cells whose hash already matches
(idempotent reruns). report turns cell records into plot-ready CSV or
JSON tables. score evaluates transferability on an embedding file.

Exit codes: 0 ok, 1 config or usage error, 2 data error, 3 numeric
error. Env overrides: ADAPOOL_OUTPUT_DIR, ADAPOOL_JOBS.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import adae, baselines, metrics, model, transfer
from .config import ExperimentConfig, load_config
from .errors import (AdapoolError, ConfigError, DataError, NumericError,
                     UsageError)
from .pool import AdapterPool

ENV_OUTPUT_DIR = "ADAPOOL_OUTPUT_DIR"
ENV_JOBS = "ADAPOOL_JOBS"
CELL_FORMAT = "adapool-cell"
CELL_VERSION = 1

SUMMARY_COLUMNS = "method,seed,avg_acc,bwt,fwt"
CURVES_COLUMNS = "method,task,mean,std"
BWT_FWT_COLUMNS = "method,bwt_mean,bwt_std,fwt_mean,fwt_std"
PARAMS_COLUMNS = "method,task,params"
PARAMS_VS_ACC_COLUMNS = "method,params,final_acc_mean,final_acc_std"


def _fmt(x) -> str:
    if x is None:
        return ""
    return "%.12g" % float(x)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# -- cell execution --------------------------------------------------------


def _param_trajectory(method, n_tasks: int) -> list[int]:
    """Stored parameter count after each task: backbone plus every
    adapter kept at that point (heads excluded; all methods add one
    identical head per task)."""
    if isinstance(method, baselines.AdaMethod):
        base = method.pool.backbone.num_params()
        per = model.adapter_param_count(method.pool.backbone.width,
                                        method.pool.bottleneck,
                                        method.pool.insertions)
        cap = method.pool.pool_size
        return [base + per * min(i, cap) for i in range(1, n_tasks + 1)]
    if isinstance(method, baselines.IndependentAdapters):
        base = method.backbone.num_params()
        per = next(iter(method.adapters.values())).num_params()
        return [base + per * i for i in range(1, n_tasks + 1)]
    if isinstance(method, (baselines.ExperienceReplay, baselines.EWC)):
        base = method.backbone.num_params()
        return [base + method.adapter.num_params()] * n_tasks
    if isinstance(method, baselines.FullFineTune):
        return [method.trunk.num_params()] * n_tasks
    return [method.backbone.num_params()] * n_tasks


def _checkpoint_hook(label, seed, cadence, ckpt_dir):
    def on_task(i, method):
        if isinstance(method, baselines.AdaMethod) and cadence \
                and i % cadence == 0:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            method.pool.save(ckpt_dir / f"{label}_seed{seed}_task{i}.ckpt")
    return on_task


def run_cell(raw_config: dict, label: str, seed: int, out_dir: str) -> str:
    """Execute one (method, seed) cell and write its record; returns the
    record path. Top-level so process pools can pickle it."""
    cfg = ExperimentConfig(raw_config)
    entry = cfg._entry(label)
    tag = entry["tag"]
    knobs = cfg.knobs_for(label)
    stream = cfg.build_stream()
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    started = time.perf_counter()

    if tag == "EWC":
        grid = knobs.ewc_lambda_grid or (knobs.ewc_lambda,)
        best = None
        for lam in sorted(grid):
            m = baselines.make_method("EWC", seed,
                                      replace(knobs, ewc_lambda=lam))
            r = metrics.run_stream(m, stream)
            r.extras["ewc_lambda"] = lam
            if best is None or r.summary()["avg_acc"] > \
                    best[0].summary()["avg_acc"]:
                best = (r, m)
        result, method = best
    else:
        method = baselines.make_method(tag, seed, knobs)
        result = metrics.run_stream(
            method, stream,
            _checkpoint_hook(label, seed, cfg.checkpoint_cadence, ckpt_dir))
    elapsed = time.perf_counter() - started

    if isinstance(method, baselines.AdaMethod):
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        method.pool.save(ckpt_dir / f"{label}_seed{seed}_final.ckpt")

    record = {
        "format": CELL_FORMAT,
        "version": CELL_VERSION,
        "experiment_hash": cfg.experiment_hash(),
        "cell_hash": cfg.cell_hash(label, seed),
        "label": label,
        "tag": tag,
        "seed": seed,
        "n_tasks": int(result.R.shape[0]),
        "R": result.R.tolist(),
        "b_bar": result.b_bar.tolist(),
        "summary": result.summary(),
        "reports": result.reports,
        "future_entries_random_heads": result.future_entries_random_heads,
        "extras": result.extras,
        "params": method.param_record(),
        "param_trajectory": _param_trajectory(method, result.R.shape[0]),
        "timing_seconds": elapsed,
    }
    cells = out / "cells"
    cells.mkdir(parents=True, exist_ok=True)
    path = cells / f"{label}_seed{seed}.json"
    _atomic_write_text(path, json.dumps(_jsonable(record), indent=1,
                                        sort_keys=True))
    return str(path)


def _cell_status(cfg: ExperimentConfig, out: Path, label: str, seed: int):
    """(path, done) for a cell; raises if the record belongs to another
    config."""
    path = out / "cells" / f"{label}_seed{seed}.json"
    if not path.exists():
        return path, False
    try:
        record = json.loads(path.read_text())
    except json.JSONDecodeError:
        raise DataError(f"{path}: corrupt cell record")
    if record.get("cell_hash") != cfg.cell_hash(label, seed):
        raise ConfigError(
            f"{path}: existing record was produced by a different config; "
            f"use a fresh output directory")
    return path, True


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    raw = json.loads(Path(args.config).read_text())
    out = Path(os.environ.get(ENV_OUTPUT_DIR) or cfg.output_dir)
    jobs = args.jobs
    if jobs is None:
        env = os.environ.get(ENV_JOBS)
        jobs = int(env) if env else 1
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")

    out.mkdir(parents=True, exist_ok=True)
    meta = {"format": "adapool-run", "version": CELL_VERSION,
            "experiment_hash": cfg.experiment_hash(),
            "labels": [m["label"] for m in cfg.methods],
            "seeds": cfg.seeds}
    _atomic_write_text(out / "run_meta.json",
                       json.dumps(meta, indent=1, sort_keys=True))

    pending = []
    for entry in cfg.methods:
        for seed in cfg.seeds:
            path, done = _cell_status(cfg, out, entry["label"], seed)
            if done:
                print(f"cell {entry['label']} seed {seed}: kept "
                      f"(hash match)")
            else:
                pending.append((entry["label"], seed))

    if pending and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(run_cell, raw, label, seed, str(out)):
                       (label, seed) for label, seed in pending}
            for fut, (label, seed) in futures.items():
                fut.result()
                print(f"cell {label} seed {seed}: done")
    else:
        for label, seed in pending:
            run_cell(raw, label, seed, str(out))
            print(f"cell {label} seed {seed}: done")

    _write_report(out, "csv")
    print(f"run complete: {len(pending)} computed, "
          f"{len(cfg.methods) * len(cfg.seeds) - len(pending)} kept, "
          f"reports in {out}")
    return 0


# -- reporting -------------------------------------------------------------


def _load_cells(out: Path) -> list[dict]:
    cell_dir = out / "cells"
    paths = sorted(cell_dir.glob("*.json")) if cell_dir.is_dir() else []
    if not paths:
        raise UsageError(f"no run records under {out}")
    records = []
    for path in paths:
        try:
            rec = json.loads(path.read_text())
        except json.JSONDecodeError:
            raise DataError(f"{path}: corrupt cell record")
        if rec.get("format") != CELL_FORMAT:
            raise DataError(f"{path}: not a cell record")
        records.append(rec)
    return records


def _report_tables(records: list[dict]) -> dict:
    by_label: dict[str, list[dict]] = {}
    for rec in records:
        by_label.setdefault(rec["label"], []).append(rec)
    for group in by_label.values():
        group.sort(key=lambda r: r["seed"])

    summary, curves, bwt_fwt, params, pva = [], [], [], [], []
    for label in sorted(by_label):
        group = by_label[label]
        n = group[0]["n_tasks"]
        for rec in group:
            if rec["n_tasks"] != n:
                raise DataError(f"{label}: records disagree on task count")
            s = rec["summary"]
            summary.append({"method": label, "seed": rec["seed"],
                            "avg_acc": s["avg_acc"], "bwt": s["bwt"],
                            "fwt": s["fwt"]})
        # running average accuracy over the tasks seen so far
        per_seed = np.array([[np.mean(rec["R"][i][:i + 1])
                              for i in range(n)] for rec in group])
        for i in range(n):
            curves.append({"method": label, "task": i + 1,
                           "mean": float(per_seed[:, i].mean()),
                           "std": float(per_seed[:, i].std())})
        bwts = [r["summary"]["bwt"] for r in group]
        fwts = [r["summary"]["fwt"] for r in group]
        if bwts[0] is not None:
            bwt_fwt.append({"method": label,
                            "bwt_mean": float(np.mean(bwts)),
                            "bwt_std": float(np.std(bwts)),
                            "fwt_mean": float(np.mean(fwts)),
                            "fwt_std": float(np.std(fwts))})
        traj = group[0]["param_trajectory"]
        for rec in group:
            if rec["param_trajectory"] != traj:
                raise DataError(f"{label}: param trajectories differ by seed")
        for i, p in enumerate(traj, start=1):
            params.append({"method": label, "task": i, "params": p})
        finals = per_seed[:, -1]
        pva.append({"method": label, "params": traj[-1],
                    "final_acc_mean": float(finals.mean()),
                    "final_acc_std": float(finals.std())})
    return {"summary": summary, "curves": curves, "bwt_fwt": bwt_fwt,
            "params": params, "params_vs_acc": pva}


def _csv_text(header: str, rows: list[dict]) -> str:
    cols = header.split(",")
    lines = [header]
    for row in rows:
        lines.append(",".join(
            str(row[c]) if isinstance(row[c], (int, str))
            else _fmt(row[c]) for c in cols))
    return "\n".join(lines) + "\n"


def _write_report(out: Path, fmt: str) -> None:
    tables = _report_tables(_load_cells(out))
    if fmt == "json":
        _atomic_write_text(out / "report.json",
                           json.dumps(tables, indent=1, sort_keys=True))
        return
    _atomic_write_text(out / "summary.csv",
                       _csv_text(SUMMARY_COLUMNS, tables["summary"]))
    _atomic_write_text(out / "curves.csv",
                       _csv_text(CURVES_COLUMNS, tables["curves"]))
    _atomic_write_text(out / "bwt_fwt.csv",
                       _csv_text(BWT_FWT_COLUMNS, tables["bwt_fwt"]))
    _atomic_write_text(out / "params.csv",
                       _csv_text(PARAMS_COLUMNS, tables["params"]))
    _atomic_write_text(out / "params_vs_acc.csv",
                       _csv_text(PARAMS_VS_ACC_COLUMNS,
                                 tables["params_vs_acc"]))


def cmd_report(args) -> int:
    out = Path(args.dir)
    _write_report(out, args.format)
    if args.format == "json":
        print(f"wrote {out / 'report.json'}")
    else:
        tables = _report_tables(_load_cells(out))
        print(SUMMARY_COLUMNS)
        for row in tables["summary"]:
            print(",".join([row["method"], str(row["seed"]),
                            _fmt(row["avg_acc"]), _fmt(row["bwt"]),
                            _fmt(row["fwt"])]))
        print(f"wrote summary/curves/bwt_fwt/params CSVs to {out}")
    return 0


# -- scoring ---------------------------------------------------------------


def cmd_score(args) -> int:
    X, Y, arity = adae.read_adae(args.features)
    out: dict = {"n": int(len(Y)), "d_in": int(X.shape[1]),
                 "label_arity": int(arity)}
    if args.model is None:
        tr = transfer.transrate(X, Y, eps=args.eps)
        out["transrate"] = tr.value
        out["transrate_degenerate"] = tr.degenerate
        out["leep"] = None
    else:
        pool = AdapterPool.load(args.model)
        slots = range(len(pool.slots)) if args.slot is None else [args.slot]
        reps = pool.rep_heads()
        entries = []
        for j in slots:
            if not 0 <= j < len(pool.slots):
                raise UsageError(f"slot {j} out of range")
            feats = model.forward_features(pool.backbone, pool.slots[j], X)
            tr = transfer.transrate(feats, Y, eps=args.eps)
            lp = transfer.leep(pool.backbone, pool.slots[j], reps[j], X, Y)
            entries.append({"slot": j, "transrate": tr.value,
                            "transrate_degenerate": tr.degenerate,
                            "leep": lp.value, "leep_dropped": lp.dropped})
        out["slots"] = entries
        best = max(range(len(entries)),
                   key=lambda i: entries[i]["transrate"])
        out["selected_slot"] = entries[best]["slot"]
    print(json.dumps(_jsonable(out), indent=1, sort_keys=True))
    return 0


# -- entry point -----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adapool",
                     description="continual-learning adapter pool "
                                 "experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a config's method x seed "
                                       "grid")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--jobs", type=int, default=None)
    p_run.add_argument("--resume", action="store_true",
                       help="continue a partial run (reruns are always "
                            "idempotent; this flag documents intent)")
    p_run.set_defaults(func=cmd_run)

    p_rep = sub.add_parser("report", help="summarize run records")
    p_rep.add_argument("--dir", required=True)
    p_rep.add_argument("--format", choices=("csv", "json"), default="csv")
    p_rep.set_defaults(func=cmd_report)

    p_score = sub.add_parser("score", help="transferability scores for an "
                                           "embedding file")
    p_score.add_argument("--features", required=True)
    p_score.add_argument("--eps", type=float, default=None)
    p_score.add_argument("--model", default=None,
                         help="adapter-pool checkpoint; scores every slot")
    p_score.add_argument("--slot", type=int, default=None)
    p_score.set_defaults(func=cmd_score)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except AdapoolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
