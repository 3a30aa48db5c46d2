"""Binary change metrics from a cumulative confusion matrix."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValidationError("confusion counters must be non-negative")

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _as_binary(name: str, array) -> np.ndarray:
    arr = np.asarray(array)
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError(f"{name} must be binary (0/1)")
    return arr.astype(bool)


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    pred = _as_binary("prediction", pred)
    gt = _as_binary("ground truth", gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    return cm + ConfusionMatrix(
        tp=int(np.count_nonzero(pred & gt)),
        tn=int(np.count_nonzero(~pred & ~gt)),
        fp=int(np.count_nonzero(pred & ~gt)),
        fn=int(np.count_nonzero(~pred & gt)),
    )


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    iou: float
    confusion: ConfusionMatrix
    split: str = ""
    checkpoint: str = ""

    def to_json(self) -> str:
        payload = {
            "precision": round(self.precision, 6),
            "recall": round(self.recall, 6),
            "f1": round(self.f1, 6),
            "iou": round(self.iou, 6),
            "confusion": {"tp": self.confusion.tp, "tn": self.confusion.tn,
                          "fp": self.confusion.fp, "fn": self.confusion.fn},
        }
        if self.split:
            payload["split"] = self.split
        if self.checkpoint:
            payload["checkpoint"] = self.checkpoint
        # Fixed-point rendering keeps six decimals even for round values.
        text = json.dumps(payload, indent=2)
        for key in ("precision", "recall", "f1", "iou"):
            text = text.replace(f'"{key}": {payload[key]!r}', f'"{key}": {payload[key]:.6f}', 1)
        return text + "\n"


def compute(cm: ConfusionMatrix, split: str = "", checkpoint: str = "") -> MetricsReport:
    """Precision, recall, F1 and IoU; every 0/0 is taken as 0."""
    p = _ratio(cm.tp, cm.tp + cm.fp)
    r = _ratio(cm.tp, cm.tp + cm.fn)
    f1 = _ratio(2 * p * r, p + r)
    iou = _ratio(cm.tp, cm.tp + cm.fp + cm.fn)
    return MetricsReport(p, r, f1, iou, cm, split, checkpoint)
