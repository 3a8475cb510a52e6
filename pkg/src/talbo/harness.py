"""Command-line entry point: single runs, sweeps, aggregation and reference curves."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .benchmark import Task, corpus_reference_curves, rank_baselines
from .config import DEFAULT_CONFIG, ConfigError, ExperimentSuite, load_suite
from .optimizer import CSV_COLUMNS, run_experiment

logger = logging.getLogger("talbo")

OUTPUT_ROOT_ENV = "TALBO_OUTPUT_ROOT"
METRICS = ("best_per_time", "cumulative_regret", "instantaneous")


def output_root(args_out: str | None, suite: ExperimentSuite | None) -> Path:
    if args_out:
        return Path(args_out)
    if os.environ.get(OUTPUT_ROOT_ENV):
        return Path(os.environ[OUTPUT_ROOT_ENV])
    return Path(suite.output_dir if suite is not None else "results")


def run_dir(root: Path, task: str, variant: str, seed: int) -> Path:
    return root / task / variant / f"seed-{seed}"


def _run_one(config_path: str, root: str, task: str, variant: str, seed: int) -> str:
    import torch

    torch.set_num_threads(1)
    suite = load_suite(config_path)
    out = run_dir(Path(root), task, variant, seed)
    out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(config_path, out / "config.yaml")
    run_experiment(suite.run_config(task, variant, seed), out_dir=out, cache_dir=Path(root) / ".cache")
    return str(out)


# -- aggregation -------------------------------------------------------------


def read_log(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty log")
    return {
        "iteration": np.array([int(r["iteration"]) for r in rows]),
        **{m: np.array([float(r[m]) for r in rows]) for m in METRICS},
        "baseline": rows[0]["baseline"],
        "seed": int(rows[0]["seed"]),
    }


def collect_logs(root: str | Path) -> dict[str, dict[int, dict[str, dict]]]:
    """``{task: {seed: {baseline: log}}}`` from every ``log.csv`` under ``root``."""
    out: dict = {}
    for path in sorted(Path(root).glob("*/*/seed-*/log.csv")):
        task = path.parent.parent.parent.name
        log = read_log(path)
        out.setdefault(task, {}).setdefault(log["seed"], {})[log["baseline"]] = log
    return out


def aggregate_rank_table(results: Mapping[str, Mapping[int, Mapping[str, np.ndarray]]]) -> dict[str, dict]:
    """Final-iteration ranks per (task, seed), then mean and half std per baseline.

    ``results[task][seed][baseline]`` is a cumulative-regret vector.
    """
    baselines = sorted({b for seeds in results.values() for cells in seeds.values() for b in cells})
    if not baselines:
        raise ValueError("no results to rank")
    gaps = [(task, seed, b) for task, seeds in results.items() for seed, cells in seeds.items() for b in baselines if b not in cells]
    if gaps:
        raise ValueError(f"missing cells (task, seed, baseline): {gaps[:20]}")
    ranks: dict[str, list[float]] = {b: [] for b in baselines}
    for task in sorted(results):
        for seed in sorted(results[task]):
            cells = results[task][seed]
            lengths = {len(np.asarray(v)) for v in cells.values()}
            if len(lengths) != 1:
                raise ValueError(f"task {task!r} seed {seed}: regret vectors differ in length {sorted(lengths)}")
            t = lengths.pop()
            for b, r in rank_baselines(cells, t).items():
                ranks[b].append(r)
    return {b: {"mean_rank": float(np.mean(v)), "half_std": 0.5 * float(np.std(v)), "cells": len(v)} for b, v in ranks.items()}


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Trailing mean over up to ``window`` points."""
    if window <= 1:
        return np.asarray(x, dtype=float)
    c = np.cumsum(np.insert(np.asarray(x, dtype=float), 0, 0.0))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def _fmt(v: float) -> str:
    return repr(float(v))


def aggregate(root: str | Path, out: str | Path | None = None, smooth_window: int = 1) -> dict:
    root = Path(root)
    out = Path(out) if out is not None else root
    logs = collect_logs(root)
    if not logs:
        raise FileNotFoundError(f"no run logs under {root}")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "curves.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "baseline", "iteration", "num_seeds"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")])
        for task in sorted(logs):
            baselines = sorted({b for cells in logs[task].values() for b in cells})
            for b in baselines:
                runs = [logs[task][s][b] for s in sorted(logs[task]) if b in logs[task][s]]
                n = min(len(r["iteration"]) for r in runs)
                stats = {}
                for m in METRICS:
                    mat = np.stack([moving_average(r[m][:n], smooth_window) for r in runs])
                    stats[m] = (mat.mean(0), mat.std(0))
                for i in range(n):
                    w.writerow([task, b, i + 1, len(runs)] + [_fmt(stats[m][k][i]) for m in METRICS for k in (0, 1)])
    regrets = {task: {seed: {b: log["cumulative_regret"] for b, log in cells.items()} for seed, cells in seeds.items()} for task, seeds in logs.items()}
    table = aggregate_rank_table(regrets)
    with open(out / "ranks.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["baseline", "mean_rank", "half_std", "cells"])
        for b in sorted(table, key=lambda k: (table[k]["mean_rank"], k)):
            w.writerow([b, _fmt(table[b]["mean_rank"]), _fmt(table[b]["half_std"]), table[b]["cells"]])
    meta = {"smooth_window": smooth_window, "tasks": sorted(logs), "runs": sum(len(c) for s in logs.values() for c in s.values())}
    (out / "aggregate.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return table


def write_reference_curves(suite: ExperimentSuite, task_name: str, path: Path, quantiles: Sequence[float] = (0.95, 0.99, 0.999, 0.9999)) -> None:
    rc = suite.run_config(task_name, suite.variants[0], suite.seeds[0])
    task = Task.build(rc.task, rc.total_slots, rc.latent.num_design_tokens, rc.latent.max_length)
    curves = corpus_reference_curves(task.corpus, task.schedule, task.scorer, quantiles)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "slot", "max"] + [f"q{q:g}" for q in quantiles])
        for slot in range(rc.num_init_slots + 1, rc.total_slots + 1):
            j = slot - 1
            w.writerow([slot - rc.num_init_slots, slot, _fmt(curves["max"][j])] + [_fmt(curves["quantiles"][float(q)][j]) for q in quantiles])


# -- CLI -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="talbo", description="Time-aware latent-space BO experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", default=None if config_required else str(DEFAULT_CONFIG), required=config_required, help="experiment YAML")
        sp.add_argument("--out", default=None, help=f"output root (default: ${OUTPUT_ROOT_ENV} or the config's output.root)")

    r = sub.add_parser("run", help="run one (task, variant, seed)")
    common(r)
    r.add_argument("--task", required=True)
    r.add_argument("--variant", required=True)
    r.add_argument("--seed", type=int, required=True)

    s = sub.add_parser("sweep", help="run the task x variant x seed cross product")
    common(s)
    s.add_argument("--parallel", type=int, default=None)

    a = sub.add_parser("aggregate", help="mean/std curves and final rank table")
    a.add_argument("--out", default=None, help="results root to read and write")
    a.add_argument("--smooth-window", type=int, default=1)

    v = sub.add_parser("validate-config", help="check a config file")
    v.add_argument("--config", default=str(DEFAULT_CONFIG))

    c = sub.add_parser("reference-curves", help="corpus max and quantile curves per iteration")
    common(c)
    c.add_argument("--task", required=True)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate-config":
            suite = load_suite(args.config)
            print(f"{args.config}: ok ({len(suite.tasks)} tasks, {len(suite.variants)} variants, {len(suite.seeds)} seeds)")
            return 0
        if args.command == "aggregate":
            root = output_root(args.out, None)
            table = aggregate(root, smooth_window=args.smooth_window)
            for b, row in sorted(table.items(), key=lambda kv: kv[1]["mean_rank"]):
                print(f"{b:22s} {row['mean_rank']:.3f} ± {row['half_std']:.3f}")
            return 0
        suite = load_suite(args.config)
        root = output_root(args.out, suite)
        if args.command == "run":
            if args.variant not in suite.variants and args.variant not in __import__("talbo.optimizer").optimizer.VARIANTS:
                raise ConfigError(f"unknown variant {args.variant!r}")
            suite.task(args.task)
            print(_run_one(args.config, str(root), args.task, args.variant, args.seed))
            return 0
        if args.command == "reference-curves":
            suite.task(args.task)
            path = root / args.task / "reference_curves.csv"
            write_reference_curves(suite, args.task, path)
            print(path)
            return 0
        if args.command == "sweep":
            return _sweep(args.config, suite, root, args.parallel or suite.parallel)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except KeyError as exc:
        print(f"config error: {exc.args[0]}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure; partial logs are already flushed
        print(f"error: {exc!r}", file=sys.stderr)
        return 1
    return 1


def _sweep(config_path: str, suite: ExperimentSuite, root: Path, parallel: int) -> int:
    jobs = [(t.name, v, s) for t in suite.tasks for v in suite.variants for s in suite.seeds]
    failures = 0
    if parallel <= 1:
        for job in jobs:
            try:
                print(_run_one(config_path, str(root), *job), flush=True)
            except Exception as exc:
                failures += 1
                print(f"error in {job}: {exc!r}", file=sys.stderr)
    else:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = {pool.submit(_run_one, config_path, str(root), *job): job for job in jobs}
            for fut in as_completed(futures):
                try:
                    print(fut.result(), flush=True)
                except Exception as exc:
                    failures += 1
                    print(f"error in {futures[fut]}: {exc!r}", file=sys.stderr)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
