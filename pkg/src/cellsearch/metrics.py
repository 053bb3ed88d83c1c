"""Overall accuracy, confusion matrices, and multi-run summaries.

Per-class (average) accuracy is intentionally not computed anywhere in this
module; overall accuracy and the confusion matrix are the reported metrics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .optim import CURVES_HEADER, EpochRecord


class ConfusionMatrix:
    """K x K count table; rows are true classes, columns predictions."""

    def __init__(self, class_names: Sequence[str]):
        self.class_names = list(class_names)
        k = len(self.class_names)
        if k < 1:
            raise ValueError("need at least one class")
        self.counts = np.zeros((k, k), dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, true_labels, predicted_labels) -> None:
        true_labels = np.asarray(true_labels, dtype=np.int64)
        predicted_labels = np.asarray(predicted_labels, dtype=np.int64)
        if true_labels.shape != predicted_labels.shape:
            raise ValueError("label arrays must have equal length")
        k = self.num_classes
        for arr, what in ((true_labels, "true"), (predicted_labels, "predicted")):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise ValueError(f"{what} labels must lie in [0, {k})")
        np.add.at(self.counts, (true_labels, predicted_labels), 1)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.class_names != self.class_names:
            raise ValueError("cannot merge confusion matrices over different classes")
        out = ConfusionMatrix(self.class_names)
        out.counts = self.counts + other.counts
        return out

    def row_normalized(self) -> np.ndarray:
        """Per-row fractions for presentation; raw counts stay the truth."""
        sums = self.counts.sum(axis=1, keepdims=True)
        return self.counts / np.maximum(sums, 1)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    return float(np.trace(cm.counts)) / cm.total


@dataclass
class RunSummary:
    """Final overall accuracy across independently seeded runs."""

    accuracies: list[float]
    mean: float
    std: float


def summarize(oa_list: Sequence[float]) -> RunSummary:
    """Mean and sample (n-1) standard deviation; a single run has std 0."""
    values = [float(v) for v in oa_list]
    if not values:
        raise ValueError("need at least one accuracy value")
    mean = float(np.mean(values))
    std = 0.0 if len(values) == 1 else float(np.std(values, ddof=1))
    return RunSummary(accuracies=values, mean=mean, std=std)


def write_cm_csv(cm: ConfusionMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true_class"] + cm.class_names)
        for i, name in enumerate(cm.class_names):
            writer.writerow([name] + [int(v) for v in cm.counts[i]])


def read_cm_csv(path) -> ConfusionMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "true_class":
        raise ValueError(f"{path} is not a confusion-matrix csv")
    names = rows[0][1:]
    cm = ConfusionMatrix(names)
    for i, row in enumerate(rows[1:]):
        if row[0] != names[i]:
            raise ValueError(f"{path}: row {i} names {row[0]!r}, expected {names[i]!r}")
        cm.counts[i] = [int(v) for v in row[1:]]
    return cm


def curve_row(r: EpochRecord) -> str:
    return (f"{r.epoch},{r.train_loss:.6f},{r.train_acc:.6f},"
            f"{r.val_loss:.6f},{r.val_acc:.6f},{r.lr:.8f},{r.seconds:.3f}")


def write_curves_csv(records: Sequence[EpochRecord], path) -> None:
    with open(path, "w") as fh:
        fh.write(CURVES_HEADER + "\n")
        for r in records:
            fh.write(curve_row(r) + "\n")
