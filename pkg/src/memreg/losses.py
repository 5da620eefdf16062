"""Segmentation, adversarial and consistency losses.

All losses are means over pixels (and over batch items and discriminator
scales), so the combination weights do not depend on image size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from memreg.errors import ShapeError
from memreg.tensor import Tensor, _make, as_tensor, take_along_axis

EPS = 1e-7

FUSION_RULE = "argmax(p_primary + 0.5 * p_aux)"
AUX_FUSION_WEIGHT = 0.5


@dataclass(frozen=True)
class LossWeights:
    aux_seg: float = 0.5
    adv_primary: float = 0.001
    adv_aux: float = 0.0002
    lambda_mr: float = 0.1

    def __post_init__(self):
        for name in ("aux_seg", "adv_primary", "adv_aux", "lambda_mr"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {value}")


def safe_log(p: Tensor, eps: float = EPS) -> Tensor:
    """``log(max(p, eps))``; the gradient uses the same floor, so it never vanishes."""
    floor = np.maximum(p.data, eps)
    return _make(np.log(floor), (p,), lambda g: (g / floor,))


def _class_axis(pred: Tensor) -> int:
    if pred.ndim not in (3, 4):
        raise ShapeError(f"expected a probability map [C, H, W] or [N, C, H, W], got {pred.shape}")
    return pred.ndim - 3


def seg_ce(pred: Tensor, label, weights=None) -> Tensor:
    """Pixel-mean cross-entropy ``-w[y] * log pred[y]``.

    ``pred`` holds per-pixel distributions, ``label`` the integer class map
    (``[H, W]``, or ``[N, H, W]`` for a batch). ``weights`` is an optional
    per-class vector (e.g. :class:`ClassBalanceWeights`).
    """
    axis = _class_axis(pred)
    num_classes = pred.shape[axis]
    label = np.asarray(label)
    expected = pred.shape[:axis] + pred.shape[axis + 1 :]
    if label.shape != expected:
        raise ShapeError(f"label shape {label.shape} does not match prediction {pred.shape}")
    if label.size and (label.min() < 0 or label.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range [{label.min()}, {label.max()}]")
    idx = np.expand_dims(label.astype(np.intp), axis)
    logp = take_along_axis(safe_log(pred), idx, axis)
    if weights is not None:
        w = np.asarray(getattr(weights, "weights", weights), dtype=pred.dtype)
        if w.shape != (num_classes,):
            raise ShapeError(f"class weights must have length {num_classes}, got shape {w.shape}")
        logp = logp * w[idx]
    return -logp.mean()


def _score_list(scores) -> list:
    if isinstance(scores, Tensor):
        return [scores]
    scores = list(scores)
    if not scores:
        raise ValueError("expected at least one score map")
    return scores


def adv_d_loss(d_src_scores, d_tgt_scores) -> Tensor:
    """Discriminator BCE: ``-E[log D(src)] - E[log(1 - D(tgt))]``, averaged over scales."""
    src, tgt = _score_list(d_src_scores), _score_list(d_tgt_scores)
    if len(src) != len(tgt):
        raise ShapeError(f"source has {len(src)} score maps but target has {len(tgt)}")
    total = None
    for s, t in zip(src, tgt):
        term = -safe_log(s).mean() - safe_log(1.0 - t).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(src))


def adv_g_loss(d_tgt_scores) -> Tensor:
    """Non-saturating generator term ``-E[log D(tgt)]``, averaged over scales."""
    tgt = _score_list(d_tgt_scores)
    total = None
    for t in tgt:
        term = -safe_log(t).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(tgt))


def memory_reg(p_aux: Tensor, p_primary: Tensor, detach_teacher: bool = True) -> Tensor:
    """Symmetric cross-entropy between the two heads' per-pixel distributions.

    ``mean_pixels(-sum_c p_aux log p_primary - sum_c p_primary log p_aux)``.
    With ``detach_teacher`` each direction treats the other head as a fixed
    target, so the gradient of each term only reaches the student head.
    """
    axis = _class_axis(p_aux)
    if p_aux.shape != p_primary.shape:
        raise ShapeError(f"head outputs differ in shape: {p_aux.shape} vs {p_primary.shape}")
    aux_t, primary_t = (p_aux.detach(), p_primary.detach()) if detach_teacher else (p_aux, p_primary)
    to_primary = -(aux_t * safe_log(p_primary)).sum(axis=axis).mean()
    to_aux = -(primary_t * safe_log(p_aux)).sum(axis=axis).mean()
    return to_primary + to_aux


# -- pseudo labels ---------------------------------------------------------
@dataclass
class PseudoLabelMap:
    labels: np.ndarray  # integer class per pixel, [H, W] (or [N, H, W])
    provenance: str = FUSION_RULE


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def fused_scores(p_primary, p_aux) -> np.ndarray:
    p, a = _as_array(p_primary), _as_array(p_aux)
    if p.shape != a.shape:
        raise ValueError(f"fusion needs aligned maps, got {p.shape} and {a.shape}")
    return p + AUX_FUSION_WEIGHT * a


def fuse_pseudo_label(p_primary, p_aux, axis: int | None = None) -> PseudoLabelMap:
    """Per-pixel ``argmax(p_primary + 0.5 * p_aux)``; ties go to the lower class id."""
    scores = fused_scores(p_primary, p_aux)
    if axis is None:
        if scores.ndim not in (1, 3, 4):
            raise ValueError(f"cannot infer the class axis of shape {scores.shape}")
        axis = 0 if scores.ndim in (1, 3) else 1
    # np.argmax returns the first maximum, i.e. the lowest class index
    return PseudoLabelMap(np.argmax(scores, axis=axis).astype(np.uint8))


# -- class balance ---------------------------------------------------------
@dataclass
class ClassBalanceWeights:
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights <= 0):
            raise ValueError("class weights must be finite and positive")

    def __len__(self):
        return len(self.weights)

    def __array__(self, dtype=None, copy=None):
        return self.weights if dtype is None else self.weights.astype(dtype)


CB_MIN, CB_MAX = 0.5, 5.0


def class_balance_weights(pseudo_labels: Iterable, num_classes: int) -> ClassBalanceWeights:
    """Median-frequency weights ``clip(sqrt(median_freq / freq_c), 0.5, 5)``.

    The median runs over classes that occur; classes that never occur get the
    ceiling weight.
    """
    counts = np.zeros(num_classes, dtype=np.int64)
    seen = False
    for item in pseudo_labels:
        labels = item.labels if isinstance(item, PseudoLabelMap) else np.asarray(item)
        if labels.size == 0:
            continue
        counts += np.bincount(labels.ravel().astype(np.intp), minlength=num_classes)[:num_classes]
        seen = True
    if not seen or counts.sum() == 0:
        raise ValueError("class_balance_weights needs at least one labeled pixel")
    freq = counts / counts.sum()
    present = freq > 0
    median = np.median(freq[present])
    weights = np.full(num_classes, CB_MAX)
    weights[present] = np.clip(np.sqrt(median / freq[present]), CB_MIN, CB_MAX)
    return ClassBalanceWeights(weights)


# -- stage totals ----------------------------------------------------------
def stage1_total(seg_primary, seg_aux, adv_primary, adv_aux, mr, weights: LossWeights = LossWeights()):
    """Segmentation + generator-side adversarial + weighted memory regularization."""
    return (seg_primary + weights.aux_seg * seg_aux + weights.adv_primary * adv_primary
            + weights.adv_aux * adv_aux + weights.lambda_mr * mr)


def stage2_total(pseg_primary, pseg_aux, mr, weights: LossWeights = LossWeights()):
    """Pseudo-label segmentation + weighted memory regularization."""
    return pseg_primary + weights.aux_seg * pseg_aux + weights.lambda_mr * mr
