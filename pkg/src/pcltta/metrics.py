"""Confusion matrix, OA, per-class IoU and mIoU."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidState


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns predictions.

    ``unpredicted[c]`` counts points of class c that received no prediction
    (label -1); they are false negatives for c and nobody's false positive.
    """
    counts: np.ndarray
    unpredicted: Optional[np.ndarray] = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = self.counts.shape[0]
        if self.counts.shape != (k, k):
            raise ValueError("confusion matrix must be square")
        if self.unpredicted is None:
            self.unpredicted = np.zeros(k, dtype=np.int64)
        self.unpredicted = np.asarray(self.unpredicted, dtype=np.int64)
        if (self.counts < 0).any() or (self.unpredicted < 0).any():
            raise ValueError("negative counts")

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum() + self.unpredicted.sum())

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts, self.unpredicted + other.unpredicted)

    def tp(self):
        return np.diag(self.counts).copy()

    def fp(self):
        return self.counts.sum(axis=0) - self.tp()

    def fn(self):
        return self.counts.sum(axis=1) - self.tp() + self.unpredicted


def accumulate_confusion(pred, gt, num_classes: int) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"{len(pred)} predictions for {len(gt)} ground-truth labels")
    for name, arr in (("prediction", pred), ("ground-truth", gt)):
        bad = (arr < -1) | (arr >= num_classes)
        if bad.any():
            raise ValueError(f"{name} label {int(arr[bad][0])} outside -1..{num_classes - 1}")
    scored = gt >= 0
    hit = scored & (pred >= 0)
    counts = np.bincount(gt[hit] * num_classes + pred[hit],
                         minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    missed = np.bincount(gt[scored & (pred < 0)], minlength=num_classes)
    return ConfusionMatrix(counts, missed)


@dataclass
class Scores:
    oa: float
    iou: np.ndarray          # nan where undefined
    miou: float

    def defined(self):
        return ~np.isnan(self.iou)


def scores(cm: ConfusionMatrix) -> Scores:
    total = cm.total
    if total == 0:
        raise InvalidState("confusion matrix is empty")
    tp, fp, fn = cm.tp(), cm.fp(), cm.fn()
    denom = tp + fp + fn
    iou = np.full(cm.num_classes, np.nan)
    ok = denom > 0
    iou[ok] = tp[ok] / denom[ok]
    miou = float(iou[ok].mean()) if ok.any() else float("nan")
    return Scores(float(tp.sum() / total), iou, miou)


def report_dict(cm: ConfusionMatrix, class_names: Sequence[str]) -> dict:
    s = scores(cm)
    tp, fp, fn = cm.tp(), cm.fp(), cm.fn()
    return {
        "oa": s.oa,
        "miou": s.miou,
        "per_class": [
            {"name": class_names[c], "iou": None if np.isnan(s.iou[c]) else float(s.iou[c]),
             "tp": int(tp[c]), "fp": int(fp[c]), "fn": int(fn[c])}
            for c in range(cm.num_classes)
        ],
    }


def format_table(rows, class_names: Sequence[str], title: str = "") -> str:
    """Aligned text table: one row per method, IoU per class, then mIoU and OA (in %).

    ``rows`` is a list of ``(method_name, Scores)``.
    """
    header = ["Method"] + list(class_names) + ["mIoU", "OA"]
    body = []
    for name, s in rows:
        cells = [name] + ["-" if np.isnan(v) else f"{100 * v:.2f}" for v in s.iou]
        cells += [f"{100 * s.miou:.2f}", f"{100 * s.oa:.2f}"]
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    line = "-" * (sum(widths) + 2 * (len(widths) - 1))

    def fmt(cells):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))

    out = ([title] if title else []) + [line, fmt(header), line] + [fmt(r) for r in body] + [line]
    return "\n".join(out)
