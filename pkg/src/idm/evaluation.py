"""Confusion-matrix segmentation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from idm import IGNORE_INDEX
from idm.errors import ContractError, EvaluationError


@dataclass
class ConfusionMatrix:
    num_classes: int
    counts: np.ndarray = field(default=None)  # rows: truth, cols: prediction

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred, truth) -> ConfusionMatrix:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ContractError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    C = cm.num_classes
    keep = (truth != IGNORE_INDEX) & (truth >= 0) & (truth < C)
    t = truth[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= C):
        raise ContractError("prediction contains class indices outside [0, C)")
    counts = np.bincount(C * t + p, minlength=C * C).reshape(C, C)
    return ConfusionMatrix(C, cm.counts + counts)


@dataclass
class EvalReport:
    per_class_iou: np.ndarray  # nan where the class never occurs in truth or prediction
    present: np.ndarray  # bool, union > 0
    miou: float
    pixel_acc: float
    num_images: int = 0

    def as_dict(self) -> dict:
        return {
            "miou": self.miou,
            "pixel_acc": self.pixel_acc,
            "num_images": self.num_images,
            "per_class_iou": [None if np.isnan(v) else float(v) for v in self.per_class_iou],
        }


def miou(cm: ConfusionMatrix, num_images: int = 0) -> EvalReport:
    counts = cm.counts.astype(np.float64)
    if counts.sum() == 0:
        raise EvaluationError("confusion matrix is empty")
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    present = union > 0
    iou = np.full(cm.num_classes, np.nan)
    iou[present] = tp[present] / union[present]
    return EvalReport(
        per_class_iou=iou,
        present=present,
        miou=float(iou[present].mean()),
        pixel_acc=float(tp.sum() / counts.sum()),
        num_images=num_images,
    )


def evaluate_predictions(preds, truths, num_classes: int) -> EvalReport:
    cm = ConfusionMatrix(num_classes)
    n = 0
    for p, t in zip(preds, truths):
        cm = accumulate(cm, p, t)
        n += 1
    return miou(cm, num_images=n)


def evaluate_model(model, samples, num_classes: int | None = None) -> EvalReport:
    from idm.model import predict

    num_classes = num_classes or model.arch.num_classes
    preds = predict(model, np.stack([s.image for s in samples]))
    return evaluate_predictions(preds, [s.label for s in samples], num_classes)
