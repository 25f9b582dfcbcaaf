"""Confusion-matrix metrics (IoU, Dice, accuracy) and k-NN vote upsampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .neighbors import knn


def confusion_matrix(pred, gt, n_classes: int) -> np.ndarray:
    """``cm[g, p]`` counts points with ground truth ``g`` predicted as ``p``."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gt.shape}")
    for arr, what in ((pred, "prediction"), (gt, "ground truth")):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{what} label outside [0, {n_classes})")
    return np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


@dataclass
class MetricsReport:
    per_class_iou: list
    per_class_dsc: list
    miou: float
    dsc: float
    acc: float
    per_cloud: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {
            "miou": self.miou,
            "dsc": self.dsc,
            "acc": self.acc,
            "per_class_iou": self.per_class_iou,
            "per_class_dsc": self.per_class_dsc,
        }
        if self.per_cloud:
            out["per_cloud"] = [r.to_dict() for r in self.per_cloud]
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def report_from_confusion(cm: np.ndarray) -> MetricsReport:
    """Classes with no ground truth and no prediction get ``None`` and are skipped in means."""
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    present = (tp + fp + fn) > 0
    iou = np.where(present, tp / np.where(present, tp + fp + fn, 1), np.nan)
    dsc = np.where(present, 2 * tp / np.where(present, 2 * tp + fp + fn, 1), np.nan)
    total = cm.sum()
    acc = float(tp.sum() / total) if total else 0.0
    miou = float(iou[present].mean()) if present.any() else 0.0
    mdsc = float(dsc[present].mean()) if present.any() else 0.0
    as_list = lambda a: [None if np.isnan(v) else float(v) for v in a]
    return MetricsReport(as_list(iou), as_list(dsc), miou, mdsc, acc)


def evaluate(pred, gt, n_classes: int) -> MetricsReport:
    return report_from_confusion(confusion_matrix(pred, gt, n_classes))


def evaluate_many(preds, gts, n_classes: int) -> MetricsReport:
    """Headline numbers are means of per-cloud metrics; per-class values pool all points."""
    reports = [evaluate(p, g, n_classes) for p, g in zip(preds, gts)]
    if not reports:
        raise ValueError("nothing to evaluate")
    cm = sum(confusion_matrix(p, g, n_classes) for p, g in zip(preds, gts))
    pooled = report_from_confusion(cm)
    return MetricsReport(
        pooled.per_class_iou,
        pooled.per_class_dsc,
        float(np.mean([r.miou for r in reports])),
        float(np.mean([r.dsc for r in reports])),
        float(np.mean([r.acc for r in reports])),
        reports,
    )


def majority_vote(votes: np.ndarray, n_classes: int | None = None) -> np.ndarray:
    """Row-wise most frequent label; ties go to the lowest label."""
    votes = np.asarray(votes, dtype=np.int64)
    if votes.ndim == 1:
        votes = votes[:, None]
    C = int(votes.max()) + 1 if n_classes is None else n_classes
    counts = np.zeros((len(votes), C), dtype=np.int64)
    rows = np.repeat(np.arange(len(votes)), votes.shape[1])
    np.add.at(counts, (rows, votes.ravel()), 1)
    return counts.argmax(axis=1)


def knn_vote_upsample(sampled_coords, sampled_labels, full_coords, k: int = 5) -> np.ndarray:
    """Label every full-resolution point by majority over its k nearest samples."""
    sampled_coords = np.asarray(getattr(sampled_coords, "coords", sampled_coords), dtype=np.float64)
    sampled_labels = np.asarray(sampled_labels, dtype=np.int64)
    full_coords = np.asarray(getattr(full_coords, "coords", full_coords), dtype=np.float64)
    if len(sampled_coords) == 0:
        raise ValueError("no sampled points")
    if k < 1:
        raise ValueError("k must be >= 1")
    nbr = knn(sampled_coords, full_coords, k)
    return majority_vote(sampled_labels[nbr])
