"""Accuracy metrics over ranked-prediction logs.

Three headline numbers are computed from a log of (true class, ranked
predictions) entries: top-1 accuracy, top-5 accuracy, and normalized
top-1 accuracy (the unweighted mean of per-class top-1 accuracies, which
ignores class imbalance). Plus the row-normalized confusion matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ValidationError

REQUIRED_SCOPES = ("A,B", "B")


@dataclass(frozen=True)
class PredictionLog:
    """Ranked predictions per test sample; scores descending, no duplicates."""

    entries: tuple  # ((true_class, (pred0, pred1, ...)), ...)
    num_classes: int

    @classmethod
    def from_entries(cls, entries, num_classes: int) -> "PredictionLog":
        norm = []
        for i, (true, ranked) in enumerate(entries):
            ranked = tuple(int(p) for p in ranked)
            if not 0 <= true < num_classes:
                raise ValidationError(f"entry {i}: true class {true} out of range [0, {num_classes})")
            if len(set(ranked)) != len(ranked):
                raise ValidationError(f"entry {i}: duplicate ranked predictions {ranked}")
            if any(not 0 <= p < num_classes for p in ranked):
                raise ValidationError(f"entry {i}: prediction out of range in {ranked}")
            norm.append((int(true), ranked))
        return cls(entries=tuple(norm), num_classes=num_classes)

    def __len__(self):
        return len(self.entries)


def load_prediction_log(path, num_classes: int) -> PredictionLog:
    """TSV: true_class <TAB> comma-separated ranked class ids."""
    entries = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValidationError(f"{path} line {lineno}: expected 2 fields, got {len(parts)}")
            entries.append((int(parts[0]), tuple(int(t) for t in parts[1].split(","))))
    return PredictionLog.from_entries(entries, num_classes)


def save_prediction_log(path, log: PredictionLog) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for true, ranked in log.entries:
            f.write(f"{true}\t{','.join(str(p) for p in ranked)}\n")


def accuracy_top_k(log: PredictionLog, k: int) -> float:
    """Fraction of entries whose true class is among the first k predictions."""
    if len(log) == 0:
        raise ContractError("accuracy is undefined on an empty log")
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if any(len(ranked) < k for _, ranked in log.entries):
        raise ContractError(f"some entries rank fewer than {k} classes")
    hits = sum(1 for true, ranked in log.entries if true in ranked[:k])
    return hits / len(log)


def per_class_counts(log: PredictionLog) -> np.ndarray:
    counts = np.zeros(log.num_classes, dtype=np.int64)
    for true, _ in log.entries:
        counts[true] += 1
    return counts


def normalized_accuracy_top1(log: PredictionLog) -> float:
    """Unweighted mean of per-class top-1 accuracy (absent classes excluded)."""
    if len(log) == 0:
        raise ContractError("accuracy is undefined on an empty log")
    counts = np.zeros(log.num_classes, dtype=np.int64)
    hits = np.zeros(log.num_classes, dtype=np.int64)
    for true, ranked in log.entries:
        counts[true] += 1
        if ranked[0] == true:
            hits[true] += 1
    present = counts > 0
    # exact (order-insensitive) summation of the per-class accuracies
    accs = hits[present] / counts[present]
    return math.fsum(accs) / int(present.sum())


def confusion_matrix(log: PredictionLog, normalize: bool = False) -> np.ndarray:
    """(true, predicted) top-1 counts; normalized rows sum to 1 where defined."""
    if len(log) == 0:
        raise ContractError("confusion matrix is undefined on an empty log")
    n = log.num_classes
    cm = np.zeros((n, n), dtype=np.float64)
    for true, ranked in log.entries:
        cm[true, ranked[0]] += 1.0
    if normalize:
        row = cm.sum(axis=1, keepdims=True)
        nz = row[:, 0] > 0
        cm[nz] /= row[nz]
    return cm


@dataclass
class MetricsReport:
    """All metrics of one evaluation run; accuracies stored as fractions."""

    at1: float
    at5: float
    nat1: float
    confusion: np.ndarray          # row-normalized
    per_class_counts: np.ndarray

    @classmethod
    def from_log(cls, log: PredictionLog) -> "MetricsReport":
        k5 = min(5, log.num_classes)
        return cls(
            at1=accuracy_top_k(log, 1),
            at5=accuracy_top_k(log, k5),
            nat1=normalized_accuracy_top1(log),
            confusion=confusion_matrix(log, normalize=True),
            per_class_counts=per_class_counts(log),
        )

    def as_scope_tuple(self) -> tuple[float, float, float]:
        return (self.at1, self.at5, self.nat1)


def aggregate_experiment_scores(results: dict) -> list[tuple[int, float]]:
    """Rank experiments by summed top-1 + top-5 over both evaluation scopes.

    results maps experiment id -> {scope: (at1, at5, nat1)} and must
    contain the scopes "A,B" and "B" for every experiment. Returns
    (experiment id, total) pairs, best first; ties break toward the
    lower experiment id.
    """
    totals = []
    for exp_id in sorted(results):
        scopes = results[exp_id]
        for need in REQUIRED_SCOPES:
            if need not in scopes:
                raise ValidationError(f"experiment {exp_id} is missing scope {need!r}")
        total = 0.0
        for scope in REQUIRED_SCOPES:
            at1, at5 = scopes[scope][0], scopes[scope][1]
            total += at1 + at5
        totals.append((exp_id, total))
    return sorted(totals, key=lambda t: (-t[1], t[0]))
