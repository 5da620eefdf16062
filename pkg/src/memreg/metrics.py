"""Segmentation metrics: confusion matrices, IoU and head disagreement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from memreg.losses import fused_scores


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """``conf[t, p]`` counts pixels of true class ``t`` predicted as ``p``."""
    pred = np.asarray(pred).ravel().astype(np.int64)
    truth = np.asarray(truth).ravel().astype(np.int64)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth must have the same number of pixels")
    if truth.size and (truth.min() < 0 or truth.max() >= num_classes):
        raise ValueError(f"truth labels must lie in [0, {num_classes})")
    if pred.size and (pred.min() < 0 or pred.max() >= num_classes):
        raise ValueError(f"predicted labels must lie in [0, {num_classes})")
    return np.bincount(truth * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN for a class absent from both prediction and truth."""
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), np.nan)


def per_class_iou(pred, truth, num_classes: int) -> np.ndarray:
    return iou_from_confusion(confusion_matrix(pred, truth, num_classes))


def mean_iou(ious: np.ndarray) -> float:
    """Unweighted mean over classes that occur in prediction or truth."""
    ious = np.asarray(ious, dtype=np.float64)
    if np.all(np.isnan(ious)):
        return float("nan")
    return float(np.nanmean(ious))


def disagreement_rate(p_aux: np.ndarray, p_primary: np.ndarray, axis: int = 1) -> float:
    """Fraction of pixels where the two heads' argmax classes differ."""
    return float(np.mean(np.argmax(p_aux, axis=axis) != np.argmax(p_primary, axis=axis)))


@dataclass
class RunMetrics:
    """Evaluation of one model snapshot; ``per_class_iou`` refers to the fused prediction."""

    per_class_iou: np.ndarray
    aux_per_class_iou: np.ndarray
    primary_per_class_iou: np.ndarray
    aux_miou: float
    primary_miou: float
    fused_miou: float
    disagreement_rate: float
    pixels: int = 0
    trace: list = field(default_factory=list)
    iteration: int = -1

    @property
    def miou(self) -> float:
        return self.fused_miou

    def summary(self) -> dict:
        return {"aux_miou": self.aux_miou, "primary_miou": self.primary_miou,
                "fused_miou": self.fused_miou, "disagreement_rate": self.disagreement_rate}


class MetricAccumulator:
    """Streams batches of head outputs and labels into confusion matrices."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.conf = {k: np.zeros((num_classes, num_classes), dtype=np.int64)
                     for k in ("aux", "primary", "fused")}
        self.disagree = 0
        self.pixels = 0

    def update(self, p_aux: np.ndarray, p_primary: np.ndarray, labels: np.ndarray):
        """``p_*``: [N, C, H, W] distributions; ``labels``: [N, H, W]."""
        if p_aux.shape != p_primary.shape:
            raise ValueError("aux and primary outputs must align pixel for pixel")
        a = np.argmax(p_aux, axis=1)
        p = np.argmax(p_primary, axis=1)
        f = np.argmax(fused_scores(p_primary, p_aux), axis=1)
        for key, pred in (("aux", a), ("primary", p), ("fused", f)):
            self.conf[key] += confusion_matrix(pred, labels, self.num_classes)
        self.disagree += int(np.count_nonzero(a != p))
        self.pixels += a.size

    def result(self) -> RunMetrics:
        ious = {k: iou_from_confusion(c) for k, c in self.conf.items()}
        return RunMetrics(
            per_class_iou=ious["fused"],
            aux_per_class_iou=ious["aux"],
            primary_per_class_iou=ious["primary"],
            aux_miou=mean_iou(ious["aux"]),
            primary_miou=mean_iou(ious["primary"]),
            fused_miou=mean_iou(ious["fused"]),
            disagreement_rate=self.disagree / self.pixels if self.pixels else float("nan"),
            pixels=self.pixels,
        )
