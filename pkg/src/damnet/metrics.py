"""Confusion-matrix accumulation and segmentation scores.

counts[i, j] is the number of pixels of true class i predicted as class j,
with ignored truth pixels skipped. Pixel/mean accuracy, mean and
frequency-weighted IoU work for any class count; precision, recall and F1
treat class 1 as foreground and require exactly two classes.

Classes absent from both truth and prediction have zero denominators and are
dropped from the mean-accuracy and mean-IoU averages.
"""

from __future__ import annotations

import numpy as np

from .tensor import LabelMap


class ConfusionMatrix:
    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError("need at least one class")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, predicted: LabelMap, truth: LabelMap) -> "ConfusionMatrix":
        if predicted.shape != truth.shape:
            raise ValueError(f"shape mismatch {predicted.shape} vs {truth.shape}")
        counted = truth.counted_mask()
        t = truth.labels[counted]
        p = predicted.labels[counted]
        if t.size == 0:
            return self
        for arr, name in ((t, "truth"), (p, "prediction")):
            if arr.min() < 0 or arr.max() >= self.num_classes:
                raise ValueError(f"{name} labels outside [0, {self.num_classes})")
        flat = np.bincount(t * self.num_classes + p,
                           minlength=self.num_classes ** 2)
        self.counts += flat.reshape(self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("class count mismatch")
        self.counts += other.counts
        return self

    def total(self) -> int:
        return int(self.counts.sum())

    def save_csv(self, path) -> None:
        header = "," + ",".join(f"pred_{j}" for j in range(self.num_classes))
        lines = [header]
        for i in range(self.num_classes):
            lines.append(f"true_{i}," + ",".join(str(int(v)) for v in self.counts[i]))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def compute_all(cm: ConfusionMatrix) -> dict[str, float]:
    """All scores derivable from the matrix; two-class matrices also get
    precision/recall/F1 with class 1 as foreground."""
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(counts)
    row = counts.sum(axis=1)   # pixels of true class i
    col = counts.sum(axis=0)   # pixels predicted as class i
    union = row + col - diag

    present_row = row > 0
    present_union = union > 0

    with np.errstate(divide="ignore", invalid="ignore"):
        per_class_acc = np.where(present_row, diag / row, 0.0)
        per_class_iou = np.where(present_union, diag / union, 0.0)

    out = {
        "pixel_acc": float(diag.sum() / total),
        "mean_acc": float(per_class_acc[present_row].mean()),
        "mean_iou": float(per_class_iou[present_union].mean()),
        "fw_iou": float((row[present_union] * per_class_iou[present_union]).sum() / total),
    }
    if cm.num_classes == 2:
        n11, n01, n10 = counts[1, 1], counts[0, 1], counts[1, 0]
        out["precision"] = float(n11 / (n11 + n01)) if n11 + n01 > 0 else 0.0
        out["recall"] = float(n11 / (n11 + n10)) if n11 + n10 > 0 else 0.0
        out["f1"] = float(2 * n11 / (2 * n11 + n01 + n10)) if 2 * n11 + n01 + n10 > 0 else 0.0
    return out


def format_report(scores: dict[str, float]) -> str:
    """Aligned plain-text table of the scores."""
    order = ["pixel_acc", "mean_acc", "mean_iou", "fw_iou",
             "precision", "recall", "f1"]
    names = {
        "pixel_acc": "Pixel accuracy", "mean_acc": "Mean accuracy",
        "mean_iou": "Mean IoU", "fw_iou": "FW IoU",
        "precision": "Precision", "recall": "Recall", "f1": "F1 score",
    }
    rows = [(names[k], scores[k]) for k in order if k in scores]
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{width}}  {value:.4f}" for name, value in rows)
