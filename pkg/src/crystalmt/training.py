"""Splitting, target normalization, weighted multi-task loss, Adam and the training loop."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .graph import CrystalGraph
from .model import GraphBatch, ModelConfig, ModelParams, collate, forward, init_params, predict

log = logging.getLogger(__name__)

SPLIT_STREAM = 0
SHUFFLE_STREAM = 2


class ConstantTargetError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class Dataset:
    ids: list[str]
    graphs: list[CrystalGraph]
    targets: np.ndarray  # (n, P) raw units
    property_names: list[str]
    units: list[str] = field(default_factory=list)
    digest: str = ""
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(len(self.graphs), -1)
        if self.targets.shape[1] != len(self.property_names):
            raise ValueError(f"{self.targets.shape[1]} target columns for {len(self.property_names)} properties")
        if not np.all(np.isfinite(self.targets)):
            raise ValueError("dataset targets must be finite")
        if not self.units:
            self.units = [""] * len(self.property_names)

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def n_tasks(self) -> int:
        return len(self.property_names)

    def select_tasks(self, names: Sequence[str]) -> "Dataset":
        missing = [n for n in names if n not in self.property_names]
        if missing:
            raise KeyError(f"unknown properties {missing}")
        cols = [self.property_names.index(n) for n in names]
        return Dataset(
            self.ids, self.graphs, self.targets[:, cols], list(names),
            [self.units[c] for c in cols], self.digest, list(self.warnings),
        )


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    @classmethod
    def identity(cls, n_tasks: int) -> "Normalizer":
        return cls(np.zeros(n_tasks), np.ones(n_tasks))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_normalizer(targets) -> Normalizer:
    """Per-task mean and population standard deviation."""
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] < 2:
        raise ValueError("need at least 2 training entries to fit a normalizer")
    std = y.std(axis=0)
    if np.any(std == 0):
        raise ConstantTargetError(f"constant target in task column(s) {np.flatnonzero(std == 0).tolist()}")
    return Normalizer(y.mean(axis=0), std)


@dataclass(frozen=True)
class TrainConfig:
    loss_weights: tuple[float, ...] | None = None  # None: all ones
    batch_size: int = 32
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 0.0
    max_epochs: int = 100
    patience: int = 10
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    normalize_targets: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1.0) > 1e-9 or min(self.split_ratios) < 0:
            raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {self.split_ratios}")
        if self.loss_weights is not None and any(w <= 0 for w in self.loss_weights):
            raise ValueError("loss weights must be positive")
        if self.lr < 0 or self.l2 < 0:
            raise ValueError("lr and l2 must be non-negative")

    def weights(self, n_tasks: int) -> np.ndarray:
        if self.loss_weights is None:
            return np.ones(n_tasks)
        if len(self.loss_weights) != n_tasks:
            raise ValueError(f"{len(self.loss_weights)} loss weights for {n_tasks} tasks")
        return np.asarray(self.loss_weights, dtype=np.float64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        d["loss_weights"] = None if self.loss_weights is None else list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if d.get("loss_weights") is not None:
            d["loss_weights"] = tuple(float(w) for w in d["loss_weights"])
        if "split_ratios" in d:
            d["split_ratios"] = tuple(float(r) for r in d["split_ratios"])
        return cls(**d)


def split_dataset(n: int, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded shuffle cut into train/val/test.

    Validation and test sizes are ``floor(r * n)``; whatever flooring leaves
    over goes to the training split.
    """
    if n < 3:
        raise ValueError(f"cannot split {n} entries into three non-empty sets")
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    n_test = int(math.floor(ratios[2] * n + 1e-9))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"split of {n} entries with ratios {tuple(ratios)} leaves an empty set")
    perm = np.random.default_rng([seed, SPLIT_STREAM]).permutation(n)
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def weighted_loss(preds: nx.Tensor, targets, weights) -> tuple[nx.Tensor, np.ndarray]:
    """Total loss ``(1/P) sum_p w_p L_p`` with ``L_p`` the batch mean squared error of task ``p``."""
    preds = nx.as_tensor(preds)
    targets = np.asarray(targets, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    diff = nx.sub(preds, nx.Tensor(targets))
    per_task = nx.mean_rows(nx.mul(diff, diff))
    total = nx.weighted_sum(per_task, w / len(w))
    return total, per_task.data.copy()


def loss_and_grads(params: ModelParams, batch: GraphBatch, targets, weights, cfg: ModelConfig):
    """Forward + backward on one batch; returns ``(loss, per_task_losses, grads)``."""
    tape = nx.Tape()
    bound = params.bind(tape)
    pred = forward(batch, bound, cfg)
    loss, per_task = weighted_loss(pred.values, targets, weights)
    grads = tape.backward(loss)
    return loss.item(), per_task, grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.items()}, {k: np.zeros_like(a) for k, a in params.items()})


def adam_step(params: ModelParams, grads: Mapping[str, np.ndarray], state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update; L2 decay is added to weight-matrix gradients only."""
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        if cfg.l2 and ModelParams.is_weight(name):
            g = g + cfg.l2 * theta
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        new_m[name], new_v[name] = m, v
    return ModelParams(new_params), AdamState(new_m, new_v, t)


@dataclass
class RunHistory:
    property_names: list[str]
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    wall_clock: float = 0.0

    def to_csv(self) -> str:
        cols = ["epoch", "train_loss", "train_mae_avg"] + [f"val_mae_{p}" for p in self.property_names] + ["val_mae_avg"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.rows:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])
        return buf.getvalue()

    @property
    def best(self) -> dict:
        return self.rows[self.best_epoch - 1]


@dataclass
class TrainResult:
    params: ModelParams
    normalizer: Normalizer
    history: RunHistory
    split: tuple[np.ndarray, np.ndarray, np.ndarray]
    model_config: ModelConfig
    train_config: TrainConfig


def _mae_per_task(pred_raw: np.ndarray, y_raw: np.ndarray) -> np.ndarray:
    return np.mean(np.abs(pred_raw - y_raw), axis=0)


def train(
    dataset: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    split: tuple[Sequence[int], Sequence[int], Sequence[int]] | None = None,
    init: ModelParams | None = None,
) -> TrainResult:
    """Mini-batch Adam with early stopping on average validation MAE (raw units).

    Returns the parameters from the epoch with the lowest validation metric.
    ``split`` overrides the seeded split (used for training-fraction sweeps).
    """
    if model_cfg.n_tasks != dataset.n_tasks:
        raise ValueError(f"model has {model_cfg.n_tasks} task heads, dataset has {dataset.n_tasks} properties")
    start = time.perf_counter()
    if split is None:
        split = split_dataset(len(dataset), train_cfg.split_ratios, train_cfg.seed)
    train_idx, val_idx, test_idx = (np.asarray(s, dtype=np.int64) for s in split)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ValueError("training and validation splits must be non-empty")

    y = dataset.targets
    if train_cfg.normalize_targets:
        normalizer = fit_normalizer(y[train_idx])
    else:
        normalizer = Normalizer.identity(dataset.n_tasks)
    y_norm = normalizer.normalize(y)
    weights = train_cfg.weights(dataset.n_tasks)

    first = dataset.graphs[0]
    params = init if init is not None else init_params(model_cfg, first.atom_features.shape[1], first.bond_features.shape[1])
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng([train_cfg.seed, SHUFFLE_STREAM])

    train_graphs = [dataset.graphs[i] for i in train_idx]
    val_graphs = [dataset.graphs[i] for i in val_idx]

    history = RunHistory(list(dataset.property_names))
    best_metric = math.inf
    best_params = params.copy()
    wait = 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        loss_sum = 0.0
        for b, s in enumerate(range(0, len(order), train_cfg.batch_size)):
            idx = order[s : s + train_cfg.batch_size]
            batch = collate([dataset.graphs[i] for i in idx])
            try:
                loss, _, grads = loss_and_grads(params, batch, y_norm[idx], weights, model_cfg)
                params, state = adam_step(params, grads, state, train_cfg)
            except nx.NumericalError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingError(f"epoch {epoch}, batch {b}: non-finite loss")
            loss_sum += loss * len(idx)

        train_mae = _mae_per_task(normalizer.denormalize(predict(train_graphs, params, model_cfg)), y[train_idx])
        val_mae = _mae_per_task(normalizer.denormalize(predict(val_graphs, params, model_cfg)), y[val_idx])
        avg = float(np.mean(val_mae))
        row = {"epoch": epoch, "train_loss": loss_sum / len(order), "train_mae_avg": float(np.mean(train_mae)), "val_mae_avg": avg}
        row.update({f"val_mae_{p}": float(m) for p, m in zip(dataset.property_names, val_mae)})
        history.rows.append(row)
        log.debug("epoch %d loss %.6g val_mae %.6g", epoch, row["train_loss"], avg)

        if avg < best_metric:
            best_metric = avg
            best_params = params.copy()
            history.best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= train_cfg.patience:
                break

    history.wall_clock = time.perf_counter() - start
    return TrainResult(best_params, normalizer, history, (train_idx, val_idx, test_idx), model_cfg, train_cfg)
