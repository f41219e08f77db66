"""Overlap metrics (soft dice loss, hard dice, IoU) and per-class accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ConfusionCounts:
    tp: float
    fp: float
    fn: float
    tn: float


def _check_binary(arr, name):
    values = np.asarray(arr)
    if not np.isin(values, (0, 1)).all():
        raise ValueError(f"{name} must be binary")


def confusion_counts(pred_mask, target) -> ConfusionCounts:
    pred_mask = np.asarray(pred_mask)
    target = np.asarray(target)
    if pred_mask.shape != target.shape:
        raise ValueError("shape mismatch")
    _check_binary(pred_mask, "pred_mask")
    _check_binary(target, "target")
    p, t = pred_mask.astype(bool), target.astype(bool)
    return ConfusionCounts(
        tp=float(np.sum(p & t)),
        fp=float(np.sum(p & ~t)),
        fn=float(np.sum(~p & t)),
        tn=float(np.sum(~p & ~t)),
    )


def soft_dice_loss(pred, target, eps: float = 1e-5):
    """1 - (2*sum(pred*target) + eps) / (sum(pred) + sum(target) + eps).

    Works on numpy arrays and torch tensors alike (keeps autograd intact).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if tuple(pred.shape) != tuple(target.shape):
        raise ValueError("shape mismatch")
    intersection = (pred * target).sum()
    return 1.0 - (2.0 * intersection + eps) / (pred.sum() + target.sum() + eps)


def soft_dice_loss_grad(pred, target, eps: float = 1e-5) -> np.ndarray:
    """Closed-form gradient of soft_dice_loss w.r.t. pred.

    With N = 2*sum(p*t) + eps and D = sum(p) + sum(t) + eps,
    d(loss)/dp_i = -(2*t_i*D - N) / D^2.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("shape mismatch")
    if eps <= 0:
        raise ValueError("eps must be positive")
    num = 2.0 * (pred * target).sum() + eps
    den = pred.sum() + target.sum() + eps
    return -(2.0 * target * den - num) / den**2


def hard_dice(pred_mask, target) -> float:
    """2TP / (2TP + FP + FN); 1.0 when both masks are empty."""
    c = confusion_counts(pred_mask, target)
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return 2 * c.tp / denom


def iou(pred_mask, target) -> float:
    """TP / (TP + FP + FN); 1.0 when both masks are empty."""
    c = confusion_counts(pred_mask, target)
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return c.tp / denom


def per_class_accuracy(preds, labels):
    """Per-class and total accuracy.

    Classes absent from `labels` are omitted from the per-class map
    rather than reported as 0.
    """
    preds = list(preds)
    labels = list(labels)
    if not labels:
        raise ValueError("empty input")
    if len(preds) != len(labels):
        raise ValueError("preds and labels must have equal length")
    per_class = {}
    for cls in sorted(set(labels)):
        idx = [i for i, y in enumerate(labels) if y == cls]
        per_class[cls] = sum(preds[i] == labels[i] for i in idx) / len(idx)
    total = sum(p == y for p, y in zip(preds, labels)) / len(labels)
    return {"per_class": per_class, "total": total}
