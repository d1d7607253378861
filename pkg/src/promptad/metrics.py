"""Ranking metrics: ROC-AUC and average precision, image- and pixel-level.

Equal scores are grouped into a single threshold step, so tied rankings
contribute half credit to ROC and a single precision/recall point to AP.
Pixel-level evaluation pools every pixel of the split into one record
instead of averaging per image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError, MetricError

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass
class EvalRecord:
    scores: np.ndarray
    labels: np.ndarray
    level: str = "image"

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel().astype(np.int64)
        if self.scores.shape != self.labels.shape:
            raise MetricError(f"scores/labels length mismatch: {self.scores.size} vs {self.labels.size}")
        if not np.isin(self.labels, (0, 1)).all():
            raise MetricError("labels must be binary")


def _threshold_groups(record: EvalRecord):
    """Cumulative true/false positives at each distinct-score boundary."""
    order = np.argsort(-record.scores, kind="mergesort")
    s = record.scores[order]
    y = record.labels[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[last_of_group]
    fps = (last_of_group + 1) - tps
    return tps.astype(np.float64), fps.astype(np.float64)


def roc_points(record: EvalRecord):
    pos = record.labels.sum()
    neg = record.labels.size - pos
    tps, fps = _threshold_groups(record)
    tpr = np.r_[0.0, tps / pos]
    fpr = np.r_[0.0, fps / neg]
    return fpr, tpr


def roc_auc(record: EvalRecord) -> float:
    """Area under the ROC curve by trapezoidal integration over tie groups."""
    pos = record.labels.sum()
    neg = record.labels.size - pos
    if pos == 0 or neg == 0:
        raise MetricError("roc_auc undefined: need at least one positive and one negative")
    fpr, tpr = roc_points(record)
    return float(_trapezoid(tpr, fpr))


def pr_points(record: EvalRecord):
    pos = record.labels.sum()
    tps, fps = _threshold_groups(record)
    precision = tps / (tps + fps)
    recall = tps / pos
    return recall, precision


def pr_auc(record: EvalRecord) -> float:
    """Average precision: sum of precision-weighted recall increments."""
    pos = record.labels.sum()
    if pos == 0:
        raise MetricError("pr_auc undefined: no positive labels")
    recall, precision = pr_points(record)
    steps = np.diff(np.r_[0.0, recall])
    return float((steps * precision).sum())


@dataclass
class ScoredImage:
    """One test image after scoring: scalar score, label, and pixel maps."""
    image_score: float
    label: int
    score_map: np.ndarray | None = None
    gt_mask: np.ndarray | None = None
    path: str = ""
    class_id: str = ""


def evaluate(results: list[ScoredImage]) -> dict[str, float]:
    """Image metrics over per-image scores, pixel metrics over pooled pixels."""
    if not results:
        raise DatasetError("no scored images to evaluate")
    image_rec = EvalRecord([r.image_score for r in results],
                           [r.label for r in results], level="image")
    pixel_scores = []
    pixel_labels = []
    for r in results:
        if r.score_map is None:
            raise DatasetError(f"missing score map for {r.path or 'image'}")
        if r.label and r.gt_mask is None:
            raise DatasetError(f"missing ground-truth mask for anomalous image {r.path or ''}")
        gt = r.gt_mask if r.gt_mask is not None else np.zeros_like(r.score_map)
        if gt.shape != r.score_map.shape:
            raise DatasetError(f"mask shape {gt.shape} != score map {r.score_map.shape} for {r.path or ''}")
        pixel_scores.append(np.asarray(r.score_map, dtype=np.float64).ravel())
        pixel_labels.append((np.asarray(gt) > 0).astype(np.int64).ravel())
    pixel_rec = EvalRecord(np.concatenate(pixel_scores),
                           np.concatenate(pixel_labels), level="pixel")
    return {
        "i_roc": roc_auc(image_rec),
        "i_pr": pr_auc(image_rec),
        "p_roc": roc_auc(pixel_rec),
        "p_pr": pr_auc(pixel_rec),
    }
