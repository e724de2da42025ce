"""Command-line entry point: ``crystalmt <subcommand> ...``.

Failures print a JSON object ``{"schema_version", "error", "message"}`` on
stderr; usage errors exit with status 2, runtime errors with status 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from .dataio import (
    Checkpoint,
    load_checkpoint,
    load_dataset,
    read_json,
    run_manifest,
    save_checkpoint,
    write_json,
)
from .experiments import ExperimentSpec, SynthSpec, generate_synthetic, grid_search, run_experiment, sweep_train_fraction
from .graph import GraphConfig
from .metrics import evaluate
from .model import ModelConfig
from .training import TrainConfig, split_dataset, train

log = logging.getLogger("crystalmt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fail(kind: str, message: str, status: int) -> int:
    print(json.dumps({"schema_version": 1, "error": kind, "message": message}), file=sys.stderr)
    return status


def _load_config(path) -> dict:
    cfg = read_json(path) if path else {}
    unknown = set(cfg) - {"schema_version", "graph", "model", "train", "tasks", "element_table", "band_gap_task"}
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    return cfg


def cmd_synth(args) -> int:
    d = read_json(args.spec) if args.spec else {}
    d.pop("schema_version", None)
    if args.seed is not None:
        d["seed"] = args.seed
    _, _, manifest = generate_synthetic(SynthSpec.from_dict(d), args.out)
    print(json.dumps({"out": str(args.out), "n": manifest["spec"]["n"], "pearson_y1_y2": manifest["pearson_y1_y2"]}))
    return 0


def cmd_graphify(args) -> int:
    cfg = _load_config(args.config)
    ds, stats = load_dataset(args.data, GraphConfig.from_dict(cfg.get("graph", {})), cfg.get("element_table"),
                             cache_dir=args.cache_dir, jobs=args.jobs)
    print(json.dumps({"n": len(ds), "cache_hits": stats.cache_hits, "graphs_built": stats.graphs_built,
                      "warnings": len(ds.warnings)}))
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    gcfg = GraphConfig.from_dict(cfg.get("graph", {}))
    ds, _ = load_dataset(args.data, gcfg, cfg.get("element_table"), cache_dir=args.cache_dir, jobs=args.jobs)
    tasks = args.tasks.split(",") if args.tasks else cfg.get("tasks") or ds.property_names
    ds = ds.select_tasks(tasks)
    seed = args.seed if args.seed is not None else cfg.get("train", {}).get("seed", 0)
    mcfg = ModelConfig.from_dict({**cfg.get("model", {}), "n_tasks": len(tasks), "seed": seed})
    tcfg = TrainConfig.from_dict({**cfg.get("train", {}), "seed": seed})

    result = train(ds, mcfg, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.json", Checkpoint(mcfg, gcfg, result.params, result.normalizer, seed, tasks, ds.units, tcfg))
    (out / "history.csv").write_text(result.history.to_csv())
    band = cfg.get("band_gap_task")
    report = evaluate(result.params, mcfg, result.normalizer, ds, result.split[2], "test", band if band in tasks else None)
    write_json(out / "metrics.json", report.to_dict())
    tr, va, te = result.split
    write_json(out / "manifest.json", run_manifest(
        kind="train", seed=seed, tasks=tasks, data=str(args.data), dataset_digest=ds.digest,
        graph_config=gcfg.to_dict(), model_config=mcfg.to_dict(), train_config=tcfg.to_dict(),
        element_table=cfg.get("element_table"), kernel_backend=_kernels.get_backend(),
        split={"train": tr.tolist(), "val": va.tolist(), "test": te.tolist()},
        best_epoch=result.history.best_epoch, epochs_run=len(result.history.rows),
        wall_clock=result.history.wall_clock, warnings=ds.warnings,
    ))
    print(json.dumps({"out": str(out), "best_epoch": result.history.best_epoch, "test_avg_mae": report.avg_mae}))
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    ds, _ = load_dataset(args.data, ck.graph_config, args.element_table, cache_dir=args.cache_dir, jobs=args.jobs)
    ds = ds.select_tasks(ck.property_names)
    if args.split == "all":
        idx = np.arange(len(ds))
    else:
        ratios = ck.train_config.split_ratios if ck.train_config else (0.6, 0.2, 0.2)
        tr, va, te = split_dataset(len(ds), ratios, ck.seed)
        idx = {"train": tr, "val": va, "test": te}[args.split]
    band = args.band_gap_task
    report = evaluate(ck.params, ck.model_config, ck.normalizer, ds, idx, args.split, band)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "metrics.json", report.to_dict())
    print(report.to_json())
    return 0


def _spec(args) -> ExperimentSpec:
    spec = ExperimentSpec.load(args.spec)
    if args.data:
        spec.data = args.data
    if args.seed is not None:
        spec.seed = args.seed
    return spec


def cmd_experiment(args) -> int:
    spec = _spec(args)
    result = run_experiment(spec, out_dir=args.out)
    print(result.summary_csv(), end="")
    return 0


def cmd_sweep(args) -> int:
    spec = _spec(args)
    result = sweep_train_fraction(spec, out_dir=args.out)
    print(result.fractions_csv(), end="")
    return 0


def cmd_gridsearch(args) -> int:
    spec = _spec(args)
    grid = spec.grid
    if not grid:
        raise ValueError("experiment spec has an empty 'grid'")
    result = grid_search(grid, spec, budget=args.budget, out_dir=args.out, jobs=args.jobs)
    print(json.dumps({"best_trial": result.best_trial, "config": result.best, "trials": len(result.trials)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crystalmt", description="Multi-task crystal graph convolutional networks")
    p.add_argument("--version", action="version", version=f"crystalmt {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", help="synthetic-data spec JSON (defaults used when omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    def data_opts(sp):
        sp.add_argument("--data", required=True, help="dataset root (targets.csv, properties.json, structures/)")
        sp.add_argument("--cache-dir", help="graph cache directory (default: $CRYSTALMT_CACHE_DIR or DATA/.graph_cache)")
        sp.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("graphify", help="prebuild the graph cache")
    data_opts(s)
    s.add_argument("--config")
    s.set_defaults(func=cmd_graphify)

    s = sub.add_parser("train", help="train one model")
    data_opts(s)
    s.add_argument("--config", help="JSON with optional 'graph', 'model', 'train', 'tasks' sections")
    s.add_argument("--tasks", help="comma-separated property subset")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    data_opts(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    s.add_argument("--element-table")
    s.add_argument("--band-gap-task")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    for name, func, helptext in (
        ("experiment", cmd_experiment, "multi-seed task-combination experiment"),
        ("sweep", cmd_sweep, "training-fraction sweep"),
        ("gridsearch", cmd_gridsearch, "hyperparameter grid search"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--spec", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--data")
        s.add_argument("--seed", type=int)
        if name == "gridsearch":
            s.add_argument("--budget", type=int)
            s.add_argument("--jobs", type=int, default=1)
        s.set_defaults(func=func)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(parser.format_usage(), end="", file=sys.stderr)
        return _fail("usage", str(exc), 2)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        return _fail(type(exc).__name__, str(exc), 1)


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
