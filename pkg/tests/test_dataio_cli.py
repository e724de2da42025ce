import json

import numpy as np
import pytest

from crystalmt.cli import dispatch
from crystalmt.dataio import (
    Checkpoint,
    DatasetLoadError,
    dataset_digest,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    write_dataset,
)
from crystalmt.experiments import SynthSpec, generate_synthetic
from crystalmt.graph import GraphConfig
from crystalmt.metrics import evaluate
from crystalmt.model import ModelConfig
from crystalmt.training import TrainConfig, train
from helpers import cubic

GCFG = GraphConfig(max_neighbors=4, cutoff=4.0, gauss_step=1.0, z_max=20)
FAST = {
    "graph": GCFG.to_dict(),
    "model": {"n_conv": 1, "atom_len": 4, "hidden_len": 4},
    "train": {"max_epochs": 3, "patience": 2, "batch_size": 8},
}


def toy_root(tmp_path):
    root = tmp_path / "toy"
    structures = [cubic(3.0, ident="c"), cubic(3.5, ident="a"), cubic(4.0, frac=[[0, 0, 0], [0.5, 0.5, 0.5]], ident="b")]
    write_dataset(root, structures, np.array([[1.0, 0.1], [2.0, 0.2], [3.0, 0.0]]), ["e", "gap"], ["eV/atom", "eV"])
    return root


def test_load_toy_dataset(tmp_path):
    root = toy_root(tmp_path)
    ds, stats = load_dataset(root, GCFG, cache_dir=tmp_path / "cache")
    assert ds.ids == ["a", "b", "c"]
    assert ds.targets[:, 0].tolist() == [2.0, 3.0, 1.0]
    assert ds.units == ["eV/atom", "eV"] and ds.property_names == ["e", "gap"]
    assert stats.graphs_built == 3 and stats.cache_hits == 0

    again, stats = load_dataset(root, GCFG, cache_dir=tmp_path / "cache")
    assert stats.cache_hits == 3 and stats.graphs_built == 0
    for g, h in zip(ds.graphs, again.graphs):
        assert g.bond_features.tobytes() == h.bond_features.tobytes()
        assert g.edge_dst.tobytes() == h.edge_dst.tobytes()


def test_cache_dir_from_environment(tmp_path, monkeypatch):
    root = toy_root(tmp_path)
    monkeypatch.setenv("CRYSTALMT_CACHE_DIR", str(tmp_path / "envcache"))
    load_dataset(root, GCFG)
    assert len(list((tmp_path / "envcache").glob("*.npz"))) == 3


def test_unknown_id_is_named(tmp_path):
    root = toy_root(tmp_path)
    with open(root / "targets.csv", "a") as fh:
        fh.write("ghost,1.0,2.0\n")
    with pytest.raises(DatasetLoadError, match="ghost"):
        load_dataset(root, GCFG, use_cache=False)


def test_load_errors_are_itemized(tmp_path):
    root = toy_root(tmp_path)
    with open(root / "targets.csv", "a") as fh:
        fh.write("x,1.0\n")
        fh.write("y,abc,1\n")
    with pytest.raises(DatasetLoadError) as info:
        load_dataset(root, GCFG, use_cache=False, expected_units={"gap": "meV"})
    assert len(info.value.problems) == 3


def test_digest_tracks_input_bytes(tmp_path):
    root = toy_root(tmp_path)
    d0 = dataset_digest(root)
    assert dataset_digest(root) == d0
    load_dataset(root, GCFG)  # writing the cache must not change the digest
    assert dataset_digest(root) == d0
    path = root / "structures" / "a.json"
    original = path.read_bytes()
    path.write_bytes(original + b" ")
    assert dataset_digest(root) != d0
    path.write_bytes(original)
    assert dataset_digest(root) == d0


def test_checkpoint_roundtrip_is_bit_identical(tmp_path):
    structures, targets, _ = generate_synthetic(SynthSpec(n=20, seed=2))
    write_dataset(tmp_path / "d", structures, targets, ["y1", "y2", "y3"], ["a.u."] * 3)
    ds, _ = load_dataset(tmp_path / "d", GCFG)
    mcfg = ModelConfig(n_conv=1, atom_len=4, hidden_len=4, n_tasks=3)
    tcfg = TrainConfig(max_epochs=2)
    res = train(ds, mcfg, tcfg)
    before = evaluate(res.params, mcfg, res.normalizer, ds, res.split[2])
    save_checkpoint(tmp_path / "ck.json", Checkpoint(mcfg, GCFG, res.params, res.normalizer, 0, ds.property_names, ds.units, tcfg))
    ck = load_checkpoint(tmp_path / "ck.json")
    after = evaluate(ck.params, ck.model_config, ck.normalizer, ds, res.split[2])
    assert before.to_json() == after.to_json()
    for k in res.params.arrays:
        assert ck.params[k].tobytes() == res.params[k].tobytes()


def test_checkpoint_rejects_foreign_json(tmp_path):
    (tmp_path / "x.json").write_text(json.dumps({"kind": "other"}))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.json")


@pytest.fixture
def synth_root(tmp_path):
    (tmp_path / "synth.json").write_text(json.dumps({"n": 24}))
    assert dispatch(["synth", "--spec", str(tmp_path / "synth.json"), "--out", str(tmp_path / "D"), "--seed", "5"]) == 0
    (tmp_path / "cfg.json").write_text(json.dumps(FAST))
    return tmp_path


def test_cli_synth_train_eval(synth_root, capsys):
    t = synth_root
    assert len(list((t / "D" / "structures").glob("*.json"))) == 24
    status = dispatch(["train", "--data", str(t / "D"), "--config", str(t / "cfg.json"), "--seed", "7", "--out", str(t / "R")])
    assert status == 0
    for name in ("checkpoint.json", "history.csv", "manifest.json", "metrics.json"):
        assert (t / "R" / name).exists(), name
    manifest = json.loads((t / "R" / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["dataset_digest"] and manifest["code_version"]
    trained = json.loads((t / "R" / "metrics.json").read_text())

    capsys.readouterr()
    status = dispatch(["eval", "--checkpoint", str(t / "R" / "checkpoint.json"), "--data", str(t / "D"),
                       "--split", "test", "--out", str(t / "E")])
    assert status == 0
    metrics = json.loads((t / "E" / "metrics.json").read_text())
    assert metrics["schema_version"] == 1
    assert set(metrics["mae"]) == {"y1", "y2", "y3"} and set(metrics["spearman"]) == {"y1", "y2", "y3"}
    # the eval split is recomputed from the checkpoint seed
    assert metrics == trained


def test_cli_usage_error_exits_2(capsys):
    assert dispatch(["train", "--bogus"]) == 2
    assert dispatch(["frobnicate"]) == 2
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(err)["error"] == "usage"


def test_cli_runtime_error_is_json(tmp_path, capsys):
    status = dispatch(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "R")])
    assert status == 1
    doc = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert doc["error"] == "DatasetLoadError" and "missing" in doc["message"]


def test_cli_experiment_and_gridsearch(synth_root):
    t = synth_root
    spec = {"tasks": ["y1", "y2"], "n_seeds": 1, "grid": {"lr": [0.01, 0.02]}, **FAST}
    (t / "exp.json").write_text(json.dumps(spec))
    assert dispatch(["experiment", "--spec", str(t / "exp.json"), "--data", str(t / "D"), "--out", str(t / "X")]) == 0
    assert (t / "X" / "summary.csv").exists() and (t / "X" / "per_task.csv").exists()
    assert dispatch(["gridsearch", "--spec", str(t / "exp.json"), "--data", str(t / "D"), "--out", str(t / "G")]) == 0
    assert (t / "G" / "trials.csv").read_text().count("\n") == 3
