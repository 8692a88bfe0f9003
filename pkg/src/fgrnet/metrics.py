"""Confusion matrices and macro-averaged classification metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .exceptions import ContractError, DimensionError


@dataclass
class ConfusionMatrix:
    """Counts with rows = true class and columns = predicted class."""

    counts: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DimensionError(f"confusion matrix must be square, got {self.counts.shape}", axis="class")
        if (self.counts < 0).any():
            raise ContractError("confusion counts must be non-negative")
        if not self.class_names:
            self.class_names = [str(k) for k in range(self.k)]

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy_fraction(self) -> Fraction:
        """Exact trace/total."""
        return Fraction(int(np.trace(self.counts)), self.total)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: dict[str, ClassMetrics]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"accuracy\t{self.accuracy:.4f}",
            f"precision\t{self.macro_precision:.4f}",
            f"recall\t{self.macro_recall:.4f}",
            f"f1\t{self.macro_f1:.4f}",
        ]
        for name, m in self.per_class.items():
            lines.append(f"class {name}\tprecision {m.precision:.4f}\trecall {m.recall:.4f}"
                         f"\tf1 {m.f1:.4f}\tsupport {m.support}")
        return "\n".join(lines) + "\n"


def confusion_matrix(predictions, labels, k: int, class_names=None) -> ConfusionMatrix:
    predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if predictions.shape != labels.shape:
        raise DimensionError(f"{predictions.size} predictions vs {labels.size} labels", axis="sample")
    for arr, what in ((predictions, "prediction"), (labels, "label")):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ContractError(f"{what} index outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return ConfusionMatrix(counts, list(class_names) if class_names else [])


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den > 0 else 0.0


def metrics_from_confusion(cm: ConfusionMatrix) -> MetricsReport:
    """One-vs-rest per-class scores, macro-averaged without weighting.

    A class nobody predicts gets precision 0; a class with no samples gets
    recall 0. F1 is 2TP / (2TP + FP + FN).
    """
    if cm.total == 0:
        raise ContractError("cannot compute metrics from an empty confusion matrix")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    per_class = {}
    for i, name in enumerate(cm.class_names):
        per_class[name] = ClassMetrics(
            precision=_ratio(tp[i], tp[i] + fp[i]),
            recall=_ratio(tp[i], tp[i] + fn[i]),
            f1=_ratio(2 * tp[i], 2 * tp[i] + fp[i] + fn[i]),
            support=int(c[i].sum()),
        )
    values = list(per_class.values())
    return MetricsReport(
        accuracy=float(tp.sum() / c.sum()),
        macro_precision=float(np.mean([m.precision for m in values])),
        macro_recall=float(np.mean([m.recall for m in values])),
        macro_f1=float(np.mean([m.f1 for m in values])),
        per_class=per_class,
    )


def evaluate_predictions(predictions, labels, k: int, class_names=None) -> MetricsReport:
    return metrics_from_confusion(confusion_matrix(predictions, labels, k, class_names))
