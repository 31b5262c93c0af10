"""Segmentation and classification losses, plus the evaluation metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    w_ce: float = 0.4
    w_dice: float = 0.6
    lambda_cls: float = 10.0
    lambda_seg: float = 1.0
    dice_smooth: float = 1e-5

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name}={value} must be non-negative")
        if abs(self.w_ce + self.w_dice - 1.0) > 1e-12:
            raise ValueError(f"w_ce + w_dice must equal 1, got {self.w_ce + self.w_dice}")


def _check_labels(target: np.ndarray, num_classes: int, what: str) -> np.ndarray:
    target = np.asarray(target)
    if target.size == 0:
        raise ValueError(f"{what}: empty target")
    if not np.issubdtype(target.dtype, np.integer):
        if not np.all(target == np.round(target)):
            raise ValueError(f"{what}: labels must be integers")
        target = target.astype(np.int64)
    bad = (target < 0) | (target >= num_classes)
    if bad.any():
        raise ValueError(f"{what}: label {int(target[bad].flat[0])} outside [0, {num_classes})")
    return target


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood; class axis is 1 (``[N,K]`` or ``[N,K,H,W]``)."""
    k = logits.shape[1]
    target = _check_labels(target, k, "cross_entropy")
    expected = (logits.shape[0],) + logits.shape[2:]
    if target.shape != expected:
        raise ValueError(f"cross_entropy: target shape {target.shape} does not match {expected}")
    logp = F.log_softmax(logits, axis=1)
    picked = (logp * Tensor(F.one_hot(target, k, axis=1))).sum()
    return picked * (-1.0 / target.size)


def soft_dice_loss(logits: Tensor, target, smooth: float = 1e-5) -> Tensor:
    """``1 - mean_k dice_k`` on softmax probabilities, summed over batch and pixels."""
    if logits.ndim != 4:
        raise ValueError(f"soft_dice_loss: logits must be [N,K,H,W], got {logits.shape}")
    k = logits.shape[1]
    if k < 2:
        raise ValueError("soft_dice_loss: needs at least two classes")
    target = _check_labels(target, k, "soft_dice_loss")
    onehot = F.one_hot(target, k, axis=1)
    probs = F.softmax(logits, axis=1)
    inter = (probs * Tensor(onehot)).sum(axis=(0, 2, 3))
    denom = probs.sum(axis=(0, 2, 3)) + Tensor(onehot.sum(axis=(0, 2, 3)) + smooth)
    dice = (inter * 2.0 + smooth) / denom
    return 1.0 - dice.mean()


def seg_loss(logits: Tensor, target, weights: LossWeights = LossWeights()) -> Tensor:
    ce = cross_entropy(logits, target)
    dice = soft_dice_loss(logits, target, weights.dice_smooth)
    return ce * weights.w_ce + dice * weights.w_dice


def cls_loss(logits2: Tensor, logits4: Tensor, target, way) -> Tensor:
    """Cross-entropy on the head selected by ``way``.

    ``way`` is 2 or 4 for the whole batch, or a per-sample array; a batch
    holding both kinds sums the two sub-batch means.
    """
    target = np.asarray(target)
    ways = np.broadcast_to(np.asarray(way), target.shape)
    if not np.all((ways == 2) | (ways == 4)):
        raise ValueError(f"cls_loss: way flags must be 2 or 4, got {np.unique(ways).tolist()}")
    total = None
    for w, logits in ((2, logits2), (4, logits4)):
        rows = np.flatnonzero(ways == w)
        if rows.size == 0:
            continue
        sub_target = _check_labels(target[rows], w, f"cls_loss ({w}-way)")
        sub_logits = logits if rows.size == target.shape[0] else logits[rows]
        term = cross_entropy(sub_logits, sub_target)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("cls_loss: empty batch")
    return total


def final_loss(
    task: str,
    seg_l: Tensor | None = None,
    cls_l: Tensor | None = None,
    weights: LossWeights = LossWeights(),
) -> Tensor:
    """Scale the task loss for backpropagation (one task per batch)."""
    if task == "seg":
        if seg_l is None:
            raise ValueError("final_loss: seg task needs seg_l")
        return seg_l * weights.lambda_seg
    if task == "cls":
        if cls_l is None:
            raise ValueError("final_loss: cls task needs cls_l")
        return cls_l * weights.lambda_cls
    raise ValueError(f"final_loss: unknown task {task!r}")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def dice_score(pred_labels, target, class_k: int = 1) -> float:
    """Hard Dice for one class; 1.0 when the class is absent from both."""
    p = np.asarray(pred_labels) == class_k
    t = np.asarray(target) == class_k
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def accuracy(pred_labels, target) -> float:
    pred_labels, target = np.asarray(pred_labels), np.asarray(target)
    if target.size == 0:
        raise ValueError("accuracy: empty target")
    return float((pred_labels == target).mean())
