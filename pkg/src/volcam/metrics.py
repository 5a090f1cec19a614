"""Confusion counts, classification metrics, Dice overlap and report emission.

The positive class is ``cad`` (label 1). A unit is predicted positive when its
probability is >= the threshold, so a tie at exactly 0.5 counts as positive.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

UNITS = ("slice", "subject", "pixel")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for k in ("tp", "fp", "fn", "tn"):
            v = getattr(self, k)
            if int(v) != v or v < 0:
                raise ValueError(f"{k} must be a nonnegative integer, got {v!r}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricsReport:
    cm: ConfusionMatrix
    accuracy: float
    precision: float
    recall: float
    f1: float
    unit: str = "subject"
    threshold: float = 0.5
    flags: list[str] = field(default_factory=list)

    def percentages(self) -> dict[str, float]:
        t = self.cm.total
        return {k: 100.0 * getattr(self.cm, k) / t for k in ("tp", "fp", "fn", "tn")}

    def to_dict(self) -> dict:
        cm = self.cm
        return {
            "unit": self.unit,
            "threshold": self.threshold,
            "counts": {"tp": cm.tp, "fp": cm.fp, "fn": cm.fn, "tn": cm.tn, "total": cm.total},
            "percentages": {k: f"{v:.2f}" for k, v in self.percentages().items()},
            "metrics": {
                "accuracy": f"{self.accuracy:.2f}",
                "accuracy_percent": f"{100 * self.accuracy:.2f}",
                "precision": f"{self.precision:.2f}",
                "recall": f"{self.recall:.2f}",
                "f1": f"{self.f1:.2f}",
            },
            "exact": {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1},
            "flags": sorted(self.flags),
        }


def confusion(predictions, labels, threshold: float = 0.5) -> ConfusionMatrix:
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions but {y.size} labels")
    if p.size and (np.isnan(p).any() or p.min() < 0 or p.max() > 1):
        raise ValueError("predictions must be probabilities in [0, 1]")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    pred = p >= threshold
    pos = y == 1
    return ConfusionMatrix(int((pred & pos).sum()), int((pred & ~pos).sum()),
                           int((~pred & pos).sum()), int((~pred & ~pos).sum()))


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


def classification_metrics(cm: ConfusionMatrix, unit: str = "subject", threshold: float = 0.5) -> MetricsReport:
    """Accuracy, precision, recall, F1. Zero denominators give 0 and a flag instead of an error."""
    if cm.total == 0:
        raise ValueError("no evaluated units")
    if unit not in UNITS:
        raise ValueError(f"unit must be one of {UNITS}, got {unit!r}")
    flags = []
    precision, bad = _ratio(cm.tp, cm.tp + cm.fp)
    if bad:
        flags.append("precision_undefined")
    recall, bad = _ratio(cm.tp, cm.tp + cm.fn)
    if bad:
        flags.append("recall_undefined")
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    if precision + recall == 0:
        flags.append("f1_undefined")
    accuracy = (cm.tp + cm.tn) / cm.total
    return MetricsReport(cm, accuracy, precision, recall, f1, unit, threshold, flags)


def dice_coefficient(mask_a, mask_b) -> float:
    """2|A n B| / (|A| + |B|); two empty masks score 1."""
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    den = int(a.sum()) + int(b.sum())
    if den == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / den


def emit_report(report: MetricsReport | dict, path, extra: dict | None = None) -> Path:
    """Write a key-sorted JSON report; identical inputs give identical bytes."""
    body = report.to_dict() if isinstance(report, MetricsReport) else dict(report)
    if extra:
        body.update(extra)
    path = Path(path)
    path.write_text(json.dumps(body, sort_keys=True, indent=2) + "\n")
    return path


def write_predictions_csv(path, ids, probabilities, labels, threshold: float = 0.5) -> Path:
    """Per-unit audit trail: id, label, probability, predicted class."""
    if not len(ids) == len(probabilities) == len(labels):
        raise ValueError("ids, probabilities and labels must have equal length")
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "probability", "predicted"])
        for i, p, y in zip(ids, probabilities, labels):
            w.writerow([i, int(y), repr(float(p)), int(float(p) >= threshold)])
    return path
