"""Evaluation measures: MAE, Pearson and Spearman correlation, metal/non-metal ROC AUC."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

METAL_GAP_EV = 0.025
AUC_CONVENTION = "positive=non-metal, score=predicted band gap"


class UndefinedMetricError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def mae(preds, targets) -> float:
    p, t = _pair(preds, targets)
    if p.size == 0:
        raise ValueError("mae of empty input")
    return float(np.mean(np.abs(p - t)))


def pearson(x, y) -> float:
    x, y = _pair(x, y)
    if x.size < 2:
        raise UndefinedMetricError("pearson needs at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0 or syy == 0:
        raise UndefinedMetricError("pearson undefined for zero-variance input")
    r = float(np.dot(dx, dy)) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64).ravel()
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(x.size)
    # run boundaries over the sorted values
    starts = np.flatnonzero(np.r_[True, sx[1:] != sx[:-1]])
    ends = np.r_[starts[1:], x.size]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0
    return ranks


def spearman(x, y) -> float:
    x, y = _pair(x, y)
    if x.size < 2:
        raise UndefinedMetricError("spearman needs at least 2 points")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedMetricError("spearman undefined when all values are tied")
    return pearson(average_ranks(x), average_ranks(y))


def classify_metal(band_gap: float) -> str:
    return "metal" if band_gap < METAL_GAP_EV else "non-metal"


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score of a positive > score of a negative), ties counted half."""
    s, lab = _pair(scores, labels)
    pos = lab == 1
    neg = lab == 0
    if not np.all(pos | neg):
        raise ValueError("labels must be 0 or 1")
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs both classes present")
    r = average_ranks(s)
    u = r[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def improvement_pct(baseline: float, ours: float) -> float:
    """Relative reduction of error against a baseline, in percent."""
    return 100.0 * (baseline - ours) / baseline


@dataclass
class EvalReport:
    property_names: list[str]
    split: str
    n: int
    mae: dict[str, float]
    avg_mae: float
    pearson: dict[str, float | None] = field(default_factory=dict)
    spearman: dict[str, float | None] = field(default_factory=dict)
    auc: float | None = None
    auc_convention: str = AUC_CONVENTION
    improvement_pct: float | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "split": self.split,
            "n": self.n,
            "property_names": self.property_names,
            "mae": self.mae,
            "avg_mae": self.avg_mae,
            "pearson": self.pearson,
            "spearman": self.spearman,
            "auc": self.auc,
            "auc_convention": self.auc_convention,
            "improvement_pct": self.improvement_pct,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_fields(self) -> dict:
        row = {"split": self.split, "n": self.n}
        row.update({f"mae_{p}": self.mae[p] for p in self.property_names})
        row["avg_mae"] = self.avg_mae
        row.update({f"spearman_{p}": self.spearman.get(p) for p in self.property_names})
        row["auc"] = self.auc
        row["improvement_pct"] = self.improvement_pct
        return row

    def to_csv_row(self, header: bool = True) -> str:
        row = self.csv_fields()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(list(row))
        w.writerow(["" if v is None else v for v in row.values()])
        return buf.getvalue()


def report_from_arrays(
    pred_raw: np.ndarray,
    y_raw: np.ndarray,
    property_names: Sequence[str],
    split: str = "test",
    band_gap_task: str | None = None,
    baseline_avg_mae: float | None = None,
) -> EvalReport:
    pred_raw = np.asarray(pred_raw, dtype=np.float64).reshape(len(y_raw), -1)
    y_raw = np.asarray(y_raw, dtype=np.float64).reshape(len(pred_raw), -1)
    names = list(property_names)
    per_task = {p: mae(pred_raw[:, k], y_raw[:, k]) for k, p in enumerate(names)}
    report = EvalReport(names, split, len(y_raw), per_task, float(np.mean(list(per_task.values()))))

    for a, b in combinations(range(len(names)), 2):
        key = f"{names[a]}|{names[b]}"
        try:
            report.pearson[key] = pearson(y_raw[:, a], y_raw[:, b])
        except UndefinedMetricError as exc:
            report.pearson[key] = None
            report.notes.append(f"pearson {key}: {exc}")
    for k, p in enumerate(names):
        try:
            report.spearman[p] = spearman(pred_raw[:, k], y_raw[:, k])
        except UndefinedMetricError as exc:
            report.spearman[p] = None
            report.notes.append(f"spearman {p}: {exc}")

    if band_gap_task is not None:
        k = names.index(band_gap_task)
        labels = (y_raw[:, k] >= METAL_GAP_EV).astype(int)  # 1 = non-metal
        try:
            report.auc = roc_auc(pred_raw[:, k], labels)
        except UndefinedMetricError as exc:
            report.notes.append(f"auc: {exc}")
    if baseline_avg_mae is not None:
        report.improvement_pct = improvement_pct(baseline_avg_mae, report.avg_mae)
    return report


def evaluate(params, model_cfg, normalizer, dataset, indices, split: str = "test",
             band_gap_task: str | None = None, baseline: EvalReport | None = None) -> EvalReport:
    """Predict the given entries, denormalize, and compute every applicable metric."""
    from .model import predict

    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("cannot evaluate an empty split")
    graphs = [dataset.graphs[i] for i in indices]
    pred_raw = normalizer.denormalize(predict(graphs, params, model_cfg))
    return report_from_arrays(
        pred_raw, dataset.targets[indices], dataset.property_names, split, band_gap_task,
        None if baseline is None else baseline.avg_mae,
    )
