"""Dataset ingestion, graph caching, checkpoints and run manifests.

Dataset layout::

    root/
      targets.csv        id,<prop1>,<prop2>,...
      properties.json    {"schema_version": 1, "properties": [{"name": ..., "unit": ...}, ...]}
      structures/<id>.json
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import __version__
from .graph import (
    CrystalGraph,
    GraphConfig,
    StructureError,
    build_graph,
    cache_key,
    load_element_table,
    load_graph,
    parse_structure,
    save_graph,
)
from .model import ModelConfig, ModelParams
from .training import Dataset, Normalizer, TrainConfig

SCHEMA_VERSION = 1
CHECKPOINT_KIND = "crystalmt-checkpoint"


class DatasetLoadError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("dataset load failed:\n  " + "\n  ".join(self.problems))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    graph_config: GraphConfig
    params: ModelParams
    normalizer: Normalizer
    seed: int
    property_names: list[str]
    units: list[str] = field(default_factory=list)
    train_config: TrainConfig | None = None


def checkpoint_to_dict(ck: Checkpoint) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": CHECKPOINT_KIND,
        "code_version": __version__,
        "model_config": ck.model_config.to_dict(),
        "graph_config": ck.graph_config.to_dict(),
        "train_config": None if ck.train_config is None else ck.train_config.to_dict(),
        "seed": ck.seed,
        "property_names": ck.property_names,
        "units": ck.units,
        "normalizer": ck.normalizer.to_dict(),
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in ck.params.items()},
    }


def save_checkpoint(path, ck: Checkpoint) -> None:
    write_json(path, checkpoint_to_dict(ck))


def load_checkpoint(path) -> Checkpoint:
    d = read_json(path)
    if d.get("kind") != CHECKPOINT_KIND or d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: not a version-{SCHEMA_VERSION} checkpoint")
    params = ModelParams({k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["params"].items()})
    return Checkpoint(
        ModelConfig.from_dict(d["model_config"]),
        GraphConfig.from_dict(d["graph_config"]),
        params,
        Normalizer.from_dict(d["normalizer"]),
        int(d["seed"]),
        list(d["property_names"]),
        list(d.get("units", [])),
        None if d.get("train_config") is None else TrainConfig.from_dict(d["train_config"]),
    )


# ---------------------------------------------------------------------------
# datasets


def dataset_digest(root) -> str:
    """SHA-256 over every input file (path and bytes)."""
    root = Path(root)
    h = hashlib.sha256()
    files = [root / "targets.csv", root / "properties.json"] + sorted((root / "structures").glob("*.json"))
    for f in files:
        if not f.exists():
            continue
        h.update(str(f.relative_to(root)).encode() + b"\0")
        data = f.read_bytes()
        h.update(len(data).to_bytes(8, "little"))
        h.update(data)
    return h.hexdigest()


def read_properties(root) -> tuple[list[str], list[str]]:
    path = Path(root) / "properties.json"
    if not path.exists():
        return [], []
    d = read_json(path)
    props = d.get("properties", [])
    return [p["name"] for p in props], [p.get("unit", "") for p in props]


def read_targets(root) -> tuple[list[str], list[str], np.ndarray, list[str]]:
    """Parse targets.csv into (property names, ids, values, problems)."""
    path = Path(root) / "targets.csv"
    if not path.exists():
        raise DatasetLoadError([f"{path}: missing"])
    problems = []
    ids, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id" or len(header) < 2:
            raise DatasetLoadError([f"{path}: header must be 'id,<prop1>,...'"])
        names = header[1:]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                problems.append(f"targets.csv line {lineno}: expected {len(header)} fields, got {len(row)}")
                continue
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError:
                problems.append(f"targets.csv line {lineno}: non-numeric target value")
                continue
            if not all(math.isfinite(v) for v in vals):
                problems.append(f"targets.csv line {lineno}: non-finite target value")
                continue
            ids.append(row[0])
            rows.append(vals)
    values = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(names))
    return names, ids, values, problems


def resolve_cache_dir(root, cache_dir=None) -> Path:
    if cache_dir is not None:
        return Path(cache_dir)
    env = os.environ.get("CRYSTALMT_CACHE_DIR")
    return Path(env) if env else Path(root) / ".graph_cache"


@dataclass
class LoadStats:
    cache_hits: int = 0
    graphs_built: int = 0


def _build_one(args):
    text, cfg_dict, table = args
    s = parse_structure(text, z_max=cfg_dict["z_max"])
    return build_graph(s, GraphConfig.from_dict(cfg_dict), table)


def load_dataset(
    root,
    graph_cfg: GraphConfig | None = None,
    table: Mapping[int, np.ndarray] | str | Path | None = None,
    cache_dir=None,
    use_cache: bool = True,
    expected_units: Mapping[str, str] | None = None,
    jobs: int = 1,
) -> tuple[Dataset, LoadStats]:
    """Parse structures, build (or fetch cached) graphs and align targets by id.

    Entries come back sorted by id.  Every problem found is collected and
    reported together in one :class:`DatasetLoadError`.
    """
    root = Path(root)
    cfg = graph_cfg or GraphConfig()
    if isinstance(table, (str, Path)):
        table = load_element_table(table)
    names, ids, values, problems = read_targets(root)

    prop_names, units = read_properties(root)
    if prop_names and prop_names != names:
        problems.append(f"properties.json lists {prop_names} but targets.csv has columns {names}")
    if not prop_names:
        units = [""] * len(names)
    if expected_units is not None:
        for n, u in zip(names, units):
            if n in expected_units and expected_units[n] != u:
                problems.append(f"unit mismatch for {n!r}: dataset declares {u!r}, expected {expected_units[n]!r}")

    seen = set()
    for i in ids:
        if i in seen:
            problems.append(f"duplicate id {i!r} in targets.csv")
        seen.add(i)

    structures = {}
    sdir = root / "structures"
    for i in sorted(set(ids)):
        path = sdir / f"{i}.json"
        if not path.exists():
            problems.append(f"no structure file for id {i!r} ({path})")
            continue
        text = path.read_text()
        try:
            s = parse_structure(text, z_max=cfg.z_max)
        except StructureError as exc:
            problems.append(f"{path.name}: {exc}")
            continue
        if s.id != i:
            problems.append(f"{path.name}: structure id {s.id!r} does not match file name")
            continue
        structures[i] = (s, text)
    if problems:
        raise DatasetLoadError(problems)

    order = sorted(range(len(ids)), key=lambda k: ids[k])
    ids = [ids[k] for k in order]
    values = values[order]

    stats = LoadStats()
    cdir = resolve_cache_dir(root, cache_dir)
    graphs: list[CrystalGraph | None] = [None] * len(ids)
    todo = []
    for k, i in enumerate(ids):
        s, text = structures[i]
        key_path = cdir / f"{cache_key(s, cfg, table)}.npz"
        if use_cache and key_path.exists():
            graphs[k] = load_graph(key_path)
            stats.cache_hits += 1
        else:
            todo.append((k, key_path, text))

    if todo:
        args = [(text, cfg.to_dict(), table) for _, _, text in todo]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                built = list(pool.map(_build_one, args, chunksize=8))
        else:
            built = [_build_one(a) for a in args]
        if use_cache:
            cdir.mkdir(parents=True, exist_ok=True)
        for (k, key_path, _), g in zip(todo, built):
            graphs[k] = g
            stats.graphs_built += 1
            if use_cache:
                save_graph(g, key_path)

    warnings = [f"{g.id}: {g.n_short} atom(s) with fewer than {cfg.max_neighbors} neighbors" for g in graphs if g.n_short]
    ds = Dataset(ids, graphs, values, names, units, dataset_digest(root), warnings)
    return ds, stats


def write_dataset(root, structures, targets: np.ndarray, property_names, units) -> None:
    """Write structures, targets.csv and properties.json in the documented layout."""
    root = Path(root)
    sdir = root / "structures"
    sdir.mkdir(parents=True, exist_ok=True)
    for s in structures:
        (sdir / f"{s.id}.json").write_text(json.dumps(s.to_dict(), sort_keys=True) + "\n")
    with open(root / "targets.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + list(property_names))
        for s, row in zip(structures, targets):
            w.writerow([s.id] + [repr(float(v)) for v in row])
    write_json(
        root / "properties.json",
        {"schema_version": SCHEMA_VERSION, "properties": [{"name": n, "unit": u} for n, u in zip(property_names, units)]},
    )


def run_manifest(**fields) -> dict:
    d = {"schema_version": SCHEMA_VERSION, "code_version": __version__}
    d.update(fields)
    return d
