"""Confusion matrices and the accuracy / precision / recall / F1 suite.

Per-class scores are one-vs-rest; aggregates are macro (unweighted class
means). Any 0/0 ratio is defined as 0.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, k: int) -> "ConfusionMatrix":
        return cls(np.zeros((k, k), dtype=np.int64))

    @classmethod
    def from_pairs(cls, y_true: Sequence[int], y_pred: Sequence[int], k: int) -> "ConfusionMatrix":
        cm = cls.zeros(k)
        cm.update(y_true, y_pred)
        return cm

    def update(self, y_true, y_pred) -> None:
        np.add.at(self.counts, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass
class ClassScores:
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
    micro_precision: float
    micro_recall: float
    per_class: list[ClassScores]
    averaging: str = "macro"
    zero_division: str = "0/0 -> 0"

    def to_dict(self, labels: Sequence[str] | None = None) -> dict:
        d = asdict(self)
        if labels is not None:
            d["per_class"] = {name: asdict(s) for name, s in zip(labels, self.per_class)}
        return d


def f1_score(precision: float, recall: float) -> float:
    return _ratio(2.0 * precision * recall, precision + recall)


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    counts = np.asarray(cm.counts)
    total = int(counts.sum())
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or total <= 0:
        raise MetricsError("confusion matrix is empty")
    per_class = []
    tp_sum = fp_sum = fn_sum = 0
    for k in range(counts.shape[0]):
        tp = int(counts[k, k])
        fp = int(counts[:, k].sum()) - tp
        fn = int(counts[k, :].sum()) - tp
        tp_sum, fp_sum, fn_sum = tp_sum + tp, fp_sum + fp, fn_sum + fn
        p, r = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        per_class.append(ClassScores(p, r, f1_score(p, r), tp + fn))
    n = len(per_class)
    return MetricsReport(
        accuracy=_ratio(int(np.trace(counts)), total),
        macro_precision=sum(c.precision for c in per_class) / n,
        macro_recall=sum(c.recall for c in per_class) / n,
        macro_f1=sum(c.f1 for c in per_class) / n,
        micro_precision=_ratio(tp_sum, tp_sum + fp_sum),
        micro_recall=_ratio(tp_sum, tp_sum + fn_sum),
        per_class=per_class,
    )
