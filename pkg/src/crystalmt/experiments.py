"""Experiment orchestration: synthetic data, multi-seed runs, training-fraction sweeps, grid search.

Seeds: run ``k`` of an experiment (or trial ``k`` of a grid search) uses
``seed ^ k``.  Within one seed every method sees the same split, so
single-task and multi-task numbers are paired.
"""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataio import Checkpoint, load_dataset, run_manifest, save_checkpoint, write_dataset, write_json
from .graph import CrystalStructure, GraphConfig, periodic_neighbors, plane_spacings
from .metrics import EvalReport, evaluate, improvement_pct, pearson
from .model import ModelConfig
from .training import Dataset, TrainConfig, split_dataset, train

log = logging.getLogger(__name__)

SYNTH_STREAM = 3


class ExperimentError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Random crystals with targets derived from graph statistics.

    ``y1 = z_scale * mean(Z) + dist_scale * mean nearest-neighbor distance``,
    ``y2 = slope * y1 + noise_frac * std(y1) * N(0, 1)``,
    ``y3 = spread_scale * std(Z)``.
    """

    n: int = 200
    atoms: tuple[int, int] = (1, 4)
    lattice_len: tuple[float, float] = (3.0, 6.0)
    angle: tuple[float, float] = (70.0, 110.0)
    z_range: tuple[int, int] = (1, 20)
    min_distance: float = 0.8
    z_scale: float = 0.1
    dist_scale: float = 1.0
    slope: float = 1.5
    noise_frac: float = 0.05
    spread_scale: float = 0.1
    seed: int = 0
    max_retries: int = 1000

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


SYNTH_PROPERTIES = ["y1", "y2", "y3"]
SYNTH_UNITS = ["a.u.", "a.u.", "a.u."]


def _lattice_from_parameters(a, b, c, alpha, beta, gamma) -> np.ndarray:
    al, be, ga = np.radians([alpha, beta, gamma])
    va = [a, 0.0, 0.0]
    vb = [b * np.cos(ga), b * np.sin(ga), 0.0]
    cx = c * np.cos(be)
    cy = c * (np.cos(al) - np.cos(be) * np.cos(ga)) / np.sin(ga)
    cz2 = c * c - cx * cx - cy * cy
    if cz2 <= 0:
        return None
    return np.array([va, vb, [cx, cy, np.sqrt(cz2)]])


def _random_structure(rng, spec: SynthSpec, ident: str) -> CrystalStructure:
    for _ in range(spec.max_retries):
        lengths = rng.uniform(*spec.lattice_len, size=3)
        angles = rng.uniform(*spec.angle, size=3)
        lattice = _lattice_from_parameters(*lengths, *angles)
        n_atoms = int(rng.integers(spec.atoms[0], spec.atoms[1] + 1))
        frac = rng.uniform(0.0, 1.0, size=(n_atoms, 3))
        z = rng.integers(spec.z_range[0], spec.z_range[1] + 1, size=n_atoms)
        if lattice is None or abs(np.linalg.det(lattice)) < 1.0:
            continue
        if plane_spacings(lattice).min() < spec.min_distance:
            continue
        s = CrystalStructure(ident, lattice, frac, z.astype(np.int64))
        nn = _nearest_distances(s)
        if nn.min() < spec.min_distance:
            continue
        return s
    raise ExperimentError(f"could not draw a valid structure for {ident} in {spec.max_retries} tries")


def _nearest_distances(s: CrystalStructure) -> np.ndarray:
    cutoff = float(2 * np.linalg.norm(s.lattice, axis=1).max())
    nbs = periodic_neighbors(s, GraphConfig(max_neighbors=1, cutoff=cutoff))
    return np.array([nb.distance[0] for nb in nbs])


def synthetic_targets(structures: Sequence[CrystalStructure], spec: SynthSpec, rng) -> np.ndarray:
    y1 = np.array([
        spec.z_scale * s.atomic_numbers.mean() + spec.dist_scale * _nearest_distances(s).mean()
        for s in structures
    ])
    noise = rng.standard_normal(len(structures))
    y2 = spec.slope * y1 + spec.noise_frac * y1.std() * noise
    y3 = np.array([spec.spread_scale * s.atomic_numbers.std() for s in structures])
    return np.column_stack([y1, y2, y3])


def generate_synthetic(spec: SynthSpec, out_dir=None) -> tuple[list[CrystalStructure], np.ndarray, dict]:
    """Draw ``spec.n`` structures and their targets; optionally write them as a dataset."""
    rng = np.random.default_rng([spec.seed, SYNTH_STREAM])
    width = max(5, len(str(spec.n - 1)))
    structures = [_random_structure(rng, spec, f"syn{k:0{width}d}") for k in range(spec.n)]
    targets = synthetic_targets(structures, spec, rng)
    manifest = run_manifest(
        kind="synthetic-dataset",
        spec=spec.to_dict(),
        recipe={
            "y1": f"{spec.z_scale} * mean(Z) + {spec.dist_scale} * mean nearest-neighbor distance (Angstrom)",
            "y2": f"{spec.slope} * y1 + {spec.noise_frac} * std(y1) * N(0,1)",
            "y3": f"{spec.spread_scale} * std(Z)",
        },
        pearson_y1_y2=pearson(targets[:, 0], targets[:, 1]),
    )
    if out_dir is not None:
        out = Path(out_dir)
        write_dataset(out, structures, targets, SYNTH_PROPERTIES, SYNTH_UNITS)
        write_json(out / "synth_manifest.json", manifest)
    return structures, targets, manifest


def dataset_from_structures(structures, targets, graph_cfg: GraphConfig | None = None,
                            property_names=SYNTH_PROPERTIES, units=SYNTH_UNITS) -> Dataset:
    from .graph import build_graph

    cfg = graph_cfg or GraphConfig()
    graphs = [build_graph(s, cfg) for s in structures]
    return Dataset([s.id for s in structures], graphs, targets, list(property_names), list(units))


# ---------------------------------------------------------------------------
# experiment specs


@dataclass
class ExperimentSpec:
    """Schema of an experiment file (JSON); every key but ``tasks`` is optional."""

    tasks: list[str]
    name: str = "experiment"
    data: str | None = None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    graph: dict = field(default_factory=dict)
    element_table: str | None = None
    n_seeds: int = 5
    seed: int = 0
    baselines: bool = True
    train_fraction: float | None = None
    fractions: list[float] = field(default_factory=list)
    grid: dict = field(default_factory=dict)
    budget: int | None = None
    max_weight_combos: int = 16
    band_gap_task: str | None = None

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("experiment needs a non-empty task subset")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentSpec":
        d = dict(d)
        d.pop("schema_version", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment spec keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"schema_version": 1, **asdict(self)}

    def graph_config(self) -> GraphConfig:
        return GraphConfig.from_dict(self.graph)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, "seed": seed})

    def model_config(self, n_tasks: int, seed: int) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "n_tasks": n_tasks, "seed": seed})


def run_seed(spec: ExperimentSpec, k: int) -> int:
    return spec.seed ^ k


def fraction_split(n: int, ratios, seed: int, fraction: float | None):
    """Seeded split; with ``fraction`` the training set is the first ``floor(fraction * n)`` of the train pool."""
    tr, va, te = split_dataset(n, ratios, seed)
    if fraction is None:
        return tr, va, te
    size = int(math.floor(fraction * n + 1e-9))
    if size < 1:
        raise ValueError(f"training fraction {fraction} of {n} entries is empty")
    if size > len(tr):
        raise ValueError(f"training fraction {fraction} exceeds the {len(tr)}-entry training pool")
    return tr[:size], va, te


def _resolve_dataset(spec: ExperimentSpec, dataset: Dataset | None) -> Dataset:
    if dataset is not None:
        return dataset
    if spec.data is None:
        raise ValueError("experiment spec has no 'data' path and no dataset was given")
    ds, _ = load_dataset(spec.data, spec.graph_config(), spec.element_table)
    return ds


@dataclass
class RunRecord:
    seed: int
    method: str  # "MT" or "ST:<task>"
    tasks: list[str]
    fraction: float | None
    split: tuple[np.ndarray, np.ndarray, np.ndarray]
    report: EvalReport
    best_epoch: int
    epochs_run: int


def _train_eval(ds: Dataset, tasks, spec: ExperimentSpec, seed: int, split, method: str, fraction, out: Path | None):
    sub = ds.select_tasks(tasks)
    mcfg = spec.model_config(len(tasks), seed)
    tcfg = spec.train_config(seed)
    if tcfg.loss_weights is not None and len(tcfg.loss_weights) != len(tasks):
        tcfg = replace(tcfg, loss_weights=None)
    result = train(sub, mcfg, tcfg, split=split)
    gap = spec.band_gap_task if spec.band_gap_task in tasks else None
    report = evaluate(result.params, mcfg, result.normalizer, sub, split[2], "test", gap)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "history.csv").write_text(result.history.to_csv())
        write_json(out / "metrics.json", report.to_dict())
        save_checkpoint(out / "checkpoint.json", Checkpoint(
            mcfg, spec.graph_config(), result.params, result.normalizer, seed, list(tasks), sub.units, tcfg))
        write_json(out / "manifest.json", run_manifest(
            kind="run", method=method, tasks=list(tasks), seed=seed, fraction=fraction,
            dataset_digest=ds.digest, model_config=mcfg.to_dict(), train_config=tcfg.to_dict(),
            graph_config=spec.graph_config().to_dict(),
            split={"train": split[0].tolist(), "val": split[1].tolist(), "test": split[2].tolist()},
            best_epoch=result.history.best_epoch, epochs_run=len(result.history.rows),
            wall_clock=result.history.wall_clock,
        ))
    return RunRecord(seed, method, list(tasks), fraction, split, report,
                     result.history.best_epoch, len(result.history.rows))


def _methods(spec: ExperimentSpec) -> list[tuple[str, list[str]]]:
    methods = [("MT", list(spec.tasks))]
    if spec.baselines and len(spec.tasks) > 1:
        methods += [(f"ST:{t}", [t]) for t in spec.tasks]
    return methods


def _runs_csv(records: Sequence[RunRecord], tasks: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "method", "fraction", "best_epoch", "epochs_run"] + [f"mae_{t}" for t in tasks] + ["avg_mae"])
    for r in records:
        maes = [repr(r.report.mae[t]) if t in r.report.mae else "" for t in tasks]
        w.writerow([r.seed, r.method, "" if r.fraction is None else r.fraction, r.best_epoch, r.epochs_run]
                   + maes + [repr(r.report.avg_mae)])
    return buf.getvalue()


@dataclass
class Aggregate:
    """Mean and population standard deviation of test MAE across seeds."""

    method: str
    tasks: list[str]
    mean: dict[str, float]
    std: dict[str, float]
    avg_mae_mean: float
    n_seeds: int


def aggregate(records: Sequence[RunRecord]) -> Aggregate:
    tasks = records[0].tasks
    maes = np.array([[r.report.mae[t] for t in tasks] for r in records])
    avgs = np.array([r.report.avg_mae for r in records])
    return Aggregate(records[0].method, list(tasks), dict(zip(tasks, maes.mean(axis=0).tolist())),
                     dict(zip(tasks, maes.std(axis=0).tolist())), float(avgs.mean()), len(records))


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    records: list[RunRecord]
    aggregates: dict[str, Aggregate]

    def by_method(self, method: str) -> list[RunRecord]:
        return [r for r in self.records if r.method == method]

    def baseline_avg_mae(self) -> float | None:
        st = [self.aggregates.get(f"ST:{t}") for t in self.spec.tasks]
        if any(a is None for a in st):
            return None
        return float(np.mean([a.mean[a.tasks[0]] for a in st]))

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["experiment", "baseline_avg_mae", "mt_avg_mae", "improvement_pct"])
        base = self.baseline_avg_mae()
        mt = self.aggregates["MT"].avg_mae_mean
        w.writerow([self.spec.name, "" if base is None else repr(base), repr(mt),
                    "" if base is None else repr(improvement_pct(base, mt))])
        return buf.getvalue()

    def per_task_csv(self) -> str:
        tasks = self.spec.tasks
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "experiment"] + [c for t in tasks for c in (f"{t}_mean", f"{t}_std")])
        for method, agg in self.aggregates.items():
            exp = self.spec.name if method == "MT" else method.split(":", 1)[1]
            cells = []
            for t in tasks:
                cells += [repr(agg.mean[t]), repr(agg.std[t])] if t in agg.mean else ["", ""]
            w.writerow(["single-task" if method != "MT" else "multi-task", exp] + cells)
        return buf.getvalue()


def run_experiment(spec: ExperimentSpec, dataset: Dataset | None = None, out_dir=None) -> ExperimentResult:
    """Train and evaluate every method for ``n_seeds`` paired seeds and aggregate test MAE."""
    ds = _resolve_dataset(spec, dataset)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "experiment_spec.json", spec.to_dict())
    ratios = spec.train_config(spec.seed).split_ratios
    records: list[RunRecord] = []
    for k in range(spec.n_seeds):
        seed = run_seed(spec, k)
        split = fraction_split(len(ds), ratios, seed, spec.train_fraction)
        for method, tasks in _methods(spec):
            run_dir = None if out is None else out / f"seed{k}" / method.replace(":", "_")
            try:
                records.append(_train_eval(ds, tasks, spec, seed, split, method, spec.train_fraction, run_dir))
            except Exception as exc:
                if out is not None:
                    (out / "runs.csv").write_text(_runs_csv(records, spec.tasks))
                raise ExperimentError(f"seed index {k} (seed {seed}), method {method}: {exc}") from exc
    aggs = {m: aggregate([r for r in records if r.method == m]) for m, _ in _methods(spec)}
    result = ExperimentResult(spec, records, aggs)
    if out is not None:
        (out / "runs.csv").write_text(_runs_csv(records, spec.tasks))
        (out / "summary.csv").write_text(result.summary_csv())
        (out / "per_task.csv").write_text(result.per_task_csv())
    return result


@dataclass
class SweepResult:
    spec: ExperimentSpec
    records: list[RunRecord]

    def fractions_csv(self) -> str:
        fracs = sorted({r.fraction for r in self.records})
        methods = list(dict.fromkeys(r.method for r in self.records))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["property", "method"] + [f"{f:g}" for f in fracs])
        for t in list(self.spec.tasks) + ["avg"]:
            for m in methods:
                cells = []
                for f in fracs:
                    rs = [r for r in self.records if r.method == m and r.fraction == f]
                    vals = [r.report.avg_mae if t == "avg" else r.report.mae.get(t) for r in rs]
                    vals = [v for v in vals if v is not None]
                    cells.append(repr(float(np.mean(vals))) if vals else "")
                if any(cells):
                    w.writerow([t, m] + cells)
        return buf.getvalue()


def sweep_train_fraction(spec: ExperimentSpec, dataset: Dataset | None = None, out_dir=None) -> SweepResult:
    """Train on nested prefixes of each seed's training pool; val/test stay fixed per seed."""
    if not spec.fractions:
        raise ValueError("sweep needs a non-empty 'fractions' list")
    ds = _resolve_dataset(spec, dataset)
    out = Path(out_dir) if out_dir is not None else None
    ratios = spec.train_config(spec.seed).split_ratios
    records = []
    for k in range(spec.n_seeds):
        seed = run_seed(spec, k)
        for f in sorted(spec.fractions):
            split = fraction_split(len(ds), ratios, seed, f)
            for method, tasks in _methods(spec):
                run_dir = None if out is None else out / f"seed{k}" / f"frac{f:g}" / method.replace(":", "_")
                try:
                    records.append(_train_eval(ds, tasks, spec, seed, split, method, f, run_dir))
                except Exception as exc:
                    raise ExperimentError(f"seed index {k} (seed {seed}), fraction {f}, method {method}: {exc}") from exc
    result = SweepResult(spec, records)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "runs.csv").write_text(_runs_csv(records, spec.tasks))
        (out / "fractions.csv").write_text(result.fractions_csv())
    return result


# ---------------------------------------------------------------------------
# grid search

GRID_KEYS = ("n_conv", "atom_len", "hidden_len", "n_hidden_per_task", "l2", "lr", "loss_weights")
MODEL_KEYS = {"n_conv", "atom_len", "hidden_len", "n_hidden_per_task", "conv_variant"}

# default hyperparameter search space
DEFAULT_GRID = {
    "n_conv": [1, 2, 3, 4, 5],
    "atom_len": [16, 32, 64, 128],
    "hidden_len": [16, 32, 64, 128],
    "n_hidden_per_task": [1, 2, 3, 4],
    "l2": [0.0, 1e-6, 1e-4],
    "lr": [1e-4, 1e-3, 1e-2, 1e-1],
    "loss_weights": [1, 2, 3, 4, 5, 6, 7],
}


def weight_tuples(values: Sequence[float], n_tasks: int, cap: int) -> list[tuple[float, ...]]:
    """Per-task weight tuples from a value list, scaled so the smallest weight is 1, deduplicated, capped."""
    seen = []
    for combo in itertools.product(values, repeat=n_tasks):
        lo = min(combo)
        t = tuple(float(v) / lo for v in combo)
        if t not in seen:
            seen.append(t)
        if len(seen) >= cap:
            break
    return seen


def enumerate_grid(grid: Mapping[str, Sequence], n_tasks: int, weight_cap: int = 16) -> list[dict]:
    """Configurations in lexicographic order over ``GRID_KEYS`` (keys absent from ``grid`` are not varied)."""
    unknown = set(grid) - set(GRID_KEYS) - {"conv_variant"}
    if unknown:
        raise ValueError(f"unknown grid keys {sorted(unknown)}")
    keys = [k for k in ("conv_variant",) + GRID_KEYS if k in grid]
    axes = []
    for k in keys:
        vals = list(grid[k])
        if k == "loss_weights":
            vals = weight_tuples(vals, n_tasks, weight_cap)
        if not vals:
            raise ValueError(f"grid axis {k!r} is empty")
        axes.append(vals)
    return [dict(zip(keys, combo)) for combo in itertools.product(*axes)]


def config_hash(cfg: Mapping) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrialRow:
    trial: int
    config: dict
    config_hash: str
    seed: int
    val_metric: float | None
    epochs_run: int
    best_epoch: int
    status: str
    error: str = ""


def _run_trial(args):
    ds, spec, t, cfg, split = args
    seed = spec.seed ^ t
    model = {**spec.model, **{k: v for k, v in cfg.items() if k in MODEL_KEYS}, "n_tasks": ds.n_tasks, "seed": seed}
    trainp = {**spec.train, **{k: v for k, v in cfg.items() if k not in MODEL_KEYS}, "seed": seed}
    try:
        result = train(ds, ModelConfig.from_dict(model), TrainConfig.from_dict(trainp), split=split)
    except Exception as exc:  # a failed trial is logged, not fatal
        return TrialRow(t, cfg, config_hash(cfg), seed, None, 0, 0, "failed", f"{type(exc).__name__}: {exc}")
    h = result.history
    return TrialRow(t, cfg, config_hash(cfg), seed, h.best["val_mae_avg"], len(h.rows), h.best_epoch, "ok")


@dataclass
class GridResult:
    best: dict
    best_trial: int
    trials: list[TrialRow]

    def trials_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "config_hash", "config", "seed", "val_metric", "epochs_run", "best_epoch", "status", "error"])
        for r in self.trials:
            w.writerow([r.trial, r.config_hash, json.dumps(r.config, sort_keys=True), r.seed,
                        "" if r.val_metric is None else repr(r.val_metric), r.epochs_run, r.best_epoch, r.status, r.error])
        return buf.getvalue()


def grid_search(grid: Mapping[str, Sequence], spec: ExperimentSpec, dataset: Dataset | None = None,
                budget: int | None = None, out_dir=None, jobs: int = 1) -> GridResult:
    """Train each configuration (up to ``budget``) with early stopping; pick the lowest validation MAE.

    All trials share the split drawn from ``spec.seed``; trial ``t`` initializes
    and shuffles with ``spec.seed ^ t``.  Ties go to the earlier trial.
    """
    ds = _resolve_dataset(spec, dataset).select_tasks(spec.tasks)
    budget = spec.budget if budget is None else budget
    configs = enumerate_grid(grid, ds.n_tasks, spec.max_weight_combos)
    if not configs:
        raise ValueError("empty grid")
    if budget is not None:
        if budget < 1:
            raise ValueError("budget must be >= 1")
        configs = configs[:budget]
    split = split_dataset(len(ds), spec.train_config(spec.seed).split_ratios, spec.seed)
    args = [(ds, spec, t, cfg, split) for t, cfg in enumerate(configs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_trial, args))
    else:
        rows = [_run_trial(a) for a in args]

    ok = [r for r in rows if r.status == "ok"]
    if not ok:
        raise ExperimentError("all grid-search trials failed:\n  " + "\n  ".join(f"trial {r.trial}: {r.error}" for r in rows))
    best = min(ok, key=lambda r: (r.val_metric, r.trial))
    result = GridResult(best.config, best.trial, rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "trials.csv").write_text(result.trials_csv())
        write_json(out / "best_config.json", {
            "schema_version": 1, "trial": best.trial, "config": best.config,
            "config_hash": best.config_hash, "val_metric": best.val_metric,
        })
    return result
