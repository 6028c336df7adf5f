"""Confusion matrices and the derived classification metrics.

Per-class precision, recall, and F1 treat each class in turn as positive:
precision = TP/(TP+FP), recall = TP/(TP+FN), F1 = 2PR/(P+R), accuracy =
trace/total. Aggregates come in macro (unweighted mean) and support-weighted
flavors; the weighted report is the headline one.

All ratios are computed in exact rational arithmetic and converted to float
at the boundary, so algebraic identities (support-weighted recall equals
accuracy) hold bit-for-bit. A metric whose denominator is zero is reported
as 0.0 and flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class ConfusionMatrix:
    """k x k counts; rows are true classes, columns are predictions."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ContractError(f"confusion matrix must be square, "
                                f"got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ContractError("confusion matrix counts must be >= 0")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self, c: int) -> int:
        return int(self.counts[c, c])

    def fn(self, c: int) -> int:
        return int(self.counts[c].sum() - self.counts[c, c])

    def fp(self, c: int) -> int:
        return int(self.counts[:, c].sum() - self.counts[c, c])

    def tn(self, c: int) -> int:
        return self.total - self.tp(c) - self.fn(c) - self.fp(c)

    def support(self, c: int) -> int:
        return int(self.counts[c].sum())


def confusion(preds, truth, num_classes: int) -> ConfusionMatrix:
    """Count (true, predicted) pairs into a k x k matrix."""
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape or preds.ndim != 1:
        raise ContractError(
            f"preds {preds.shape} and truth {truth.shape} must be equal-length "
            f"1-d arrays")
    for name, arr in (("preds", preds), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ContractError(f"{name} labels outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (truth, preds), 1)
    return ConfusionMatrix(counts)


@dataclass
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    per_class: list[ClassMetrics]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    total: int
    positive_class: int
    zero_division_flags: list[str] = field(default_factory=list)

    @property
    def positive(self) -> ClassMetrics:
        return self.per_class[self.positive_class]

    def to_json_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "total": self.total,
            "positive_class": self.per_class[self.positive_class].name,
            "precision": self.positive.precision,
            "recall": self.positive.recall,
            "f1": self.positive.f1,
            "weighted": {"precision": self.weighted_precision,
                         "recall": self.weighted_recall,
                         "f1": self.weighted_f1},
            "macro": {"precision": self.macro_precision,
                      "recall": self.macro_recall,
                      "f1": self.macro_f1},
            "per_class": [{"name": c.name, "precision": c.precision,
                           "recall": c.recall, "f1": c.f1,
                           "support": c.support} for c in self.per_class],
            "zero_division_flags": list(self.zero_division_flags),
        }

    def to_csv_rows(self) -> list[tuple[str, object]]:
        rows: list[tuple[str, object]] = [
            ("accuracy", self.accuracy),
            ("total", self.total),
            ("precision", self.positive.precision),
            ("recall", self.positive.recall),
            ("f1", self.positive.f1),
            ("weighted_precision", self.weighted_precision),
            ("weighted_recall", self.weighted_recall),
            ("weighted_f1", self.weighted_f1),
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_f1", self.macro_f1),
        ]
        for c in self.per_class:
            rows += [(f"precision_{c.name}", c.precision),
                     (f"recall_{c.name}", c.recall),
                     (f"f1_{c.name}", c.f1),
                     (f"support_{c.name}", c.support)]
        return rows

    def table(self) -> str:
        lines = [f"{'class':<16}{'precision':>10}{'recall':>10}"
                 f"{'f1':>10}{'support':>10}"]
        for c in self.per_class:
            lines.append(f"{c.name:<16}{c.precision:>10.4f}{c.recall:>10.4f}"
                         f"{c.f1:>10.4f}{c.support:>10d}")
        lines.append(f"{'weighted':<16}{self.weighted_precision:>10.4f}"
                     f"{self.weighted_recall:>10.4f}"
                     f"{self.weighted_f1:>10.4f}{self.total:>10d}")
        lines.append(f"{'macro':<16}{self.macro_precision:>10.4f}"
                     f"{self.macro_recall:>10.4f}{self.macro_f1:>10.4f}"
                     f"{self.total:>10d}")
        lines.append(f"accuracy {self.accuracy:.4f} ({self.total} samples)")
        return "\n".join(lines)


def metrics(cm: ConfusionMatrix, positive_class: int = 1,
            class_names: list[str] | None = None) -> MetricsReport:
    """Derive the metric report from a confusion matrix, exactly."""
    k = cm.num_classes
    total = cm.total
    if total <= 0:
        raise ContractError("metrics on an empty confusion matrix")
    if not 0 <= positive_class < k:
        raise ContractError(f"positive class {positive_class} outside [0,{k})")
    names = class_names or [str(i) for i in range(k)]
    flags: list[str] = []

    def ratio(num: int, den: int, what: str) -> Fraction:
        if den == 0:
            flags.append(f"{what}: zero denominator, reported as 0")
            return Fraction(0)
        return Fraction(num, den)

    precisions, recalls, f1s, supports = [], [], [], []
    for c in range(k):
        tp, fp, fn = cm.tp(c), cm.fp(c), cm.fn(c)
        p = ratio(tp, tp + fp, f"precision[{names[c]}]")
        r = ratio(tp, tp + fn, f"recall[{names[c]}]")
        if p + r == 0:
            flags.append(f"f1[{names[c]}]: zero denominator, reported as 0")
            f = Fraction(0)
        else:
            f = 2 * p * r / (p + r)
        precisions.append(p)
        recalls.append(r)
        f1s.append(f)
        supports.append(cm.support(c))

    def macro(values: list[Fraction]) -> float:
        return float(sum(values) / k)

    def weighted(values: list[Fraction]) -> float:
        return float(sum(s * v for s, v in zip(supports, values))
                     / Fraction(total))

    accuracy = Fraction(int(np.trace(cm.counts)), total)
    per_class = [ClassMetrics(names[c], float(precisions[c]),
                              float(recalls[c]), float(f1s[c]), supports[c])
                 for c in range(k)]
    return MetricsReport(
        accuracy=float(accuracy),
        per_class=per_class,
        macro_precision=macro(precisions),
        macro_recall=macro(recalls),
        macro_f1=macro(f1s),
        weighted_precision=weighted(precisions),
        weighted_recall=weighted(recalls),
        weighted_f1=weighted(f1s),
        total=total,
        positive_class=positive_class,
        zero_division_flags=flags,
    )


def evaluate(model, dataset, batch_size: int = 32,
             positive_class: int = 1) -> tuple[ConfusionMatrix, MetricsReport]:
    """Run the model over a dataset in eval mode; argmax gives predictions."""
    images, labels = dataset.stacked()
    preds = np.empty(labels.shape, dtype=np.int64)
    for start in range(0, labels.size, batch_size):
        stop = min(start + batch_size, labels.size)
        probs = model.forward(Tensor(images[start:stop]), mode="eval")
        preds[start:stop] = probs.data.argmax(axis=1)
    cm = confusion(preds, labels, model.num_classes)
    report = metrics(cm, positive_class=positive_class,
                     class_names=list(dataset.class_names))
    return cm, report
