"""Binary classification metrics with malignant as the positive class."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    fp: int
    tn: int

    def __post_init__(self) -> None:
        for name in ("tp", "fn", "fp", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.fp + self.tn

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


def confusion_from_predictions(labels: Sequence[int], predictions: Sequence[int]) -> ConfusionMatrix:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise ValueError(f"{labels.size} labels but {predictions.size} predictions")
    return ConfusionMatrix(
        tp=int(np.sum((predictions == 1) & (labels == 1))),
        fn=int(np.sum((predictions == 0) & (labels == 1))),
        fp=int(np.sum((predictions == 1) & (labels == 0))),
        tn=int(np.sum((predictions == 0) & (labels == 0))),
    )


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator > 0 else None


@dataclass(frozen=True)
class MetricsReport:
    """Fractions in [0, 1]; ``None`` where the denominator is zero."""

    matrix: ConfusionMatrix
    accuracy: float
    sensitivity: Optional[float]
    ppv: Optional[float]
    specificity: Optional[float]

    def to_dict(self) -> Dict[str, object]:
        return {
            "confusion": self.matrix.to_dict(),
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "ppv": self.ppv,
            "specificity": self.specificity,
        }


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    if cm.total == 0:
        raise ValueError("metrics need at least one evaluated sample")
    return MetricsReport(
        matrix=cm,
        accuracy=(cm.tp + cm.tn) / cm.total,
        sensitivity=_ratio(cm.tp, cm.positives),
        ppv=_ratio(cm.tp, cm.tp + cm.fp),
        specificity=_ratio(cm.tn, cm.negatives),
    )


def specificity(cm: ConfusionMatrix) -> Optional[float]:
    return _ratio(cm.tn, cm.negatives)


def percent(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{100.0 * value:.1f}"


def format_metrics(report: MetricsReport) -> List[str]:
    cm = report.matrix
    return [
        f"Accuracy {percent(report.accuracy)} / Sensitivity {percent(report.sensitivity)} / PPV {percent(report.ppv)}",
        f"  Specificity {percent(report.specificity)}",
        f"  TP {cm.tp}  FN {cm.fn}  FP {cm.fp}  TN {cm.tn}  (total {cm.total})",
    ]


def reconstruct_confusion(
    accuracy: float,
    sensitivity: float,
    ppv: float,
    positives: int = 221,
    negatives: int = 221,
    decimals: int = 1,
) -> List[ConfusionMatrix]:
    """All integer confusion matrices whose rounded percentages match the given ones.

    Percentages are given as printed (for example ``78.3``).
    """

    if positives < 1 or negatives < 0:
        raise ValueError("need at least one positive sample")
    half_step = 0.5 * 10.0 ** (-decimals) + 1e-9
    found = []
    for tp in range(positives + 1):
        if abs(100.0 * tp / positives - sensitivity) > half_step:
            continue
        for fp in range(negatives + 1):
            if tp + fp == 0 or abs(100.0 * tp / (tp + fp) - ppv) > half_step:
                continue
            tn = negatives - fp
            if abs(100.0 * (tp + tn) / (positives + negatives) - accuracy) > half_step:
                continue
            found.append(ConfusionMatrix(tp=tp, fn=positives - tp, fp=fp, tn=tn))
    return found


__all__ = [
    "ConfusionMatrix",
    "MetricsReport",
    "confusion_from_predictions",
    "format_metrics",
    "metrics",
    "percent",
    "reconstruct_confusion",
    "specificity",
]
