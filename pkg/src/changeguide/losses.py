"""Change-detection loss (weighted BCE + Dice) and pixel metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    fg_weight: float = 9.0
    dice_eps: float = 1e-6
    prob_clamp: float = 1e-7

    def __post_init__(self):
        if self.fg_weight <= 0:
            raise ValueError(f"fg_weight must be > 0, got {self.fg_weight}")
        if self.dice_eps <= 0:
            raise ValueError(f"dice_eps must be > 0, got {self.dice_eps}")
        if not 0 < self.prob_clamp < 0.5:
            raise ValueError(f"prob_clamp must be in (0, 0.5), got {self.prob_clamp}")


def _check(P: Tensor, target: np.ndarray, op: str) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64)
    if P.shape != target.shape:
        raise ValueError(f"{op}: prediction shape {P.shape} != target shape {target.shape}")
    return target


def weighted_bce(P, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """-(1/N) * sum(w*T*log P + (1-T)*log(1-P)) over every element of the batch."""
    P = T.as_tensor(P)
    target = _check(P, target, "weighted_bce")
    Pc = T.clip(P, cfg.prob_clamp, 1.0 - cfg.prob_clamp)
    fg = T.mul(T.log(Pc), cfg.fg_weight * target)
    bg = T.mul(T.log(1.0 - Pc), 1.0 - target)
    return -T.mean(fg + bg)


def dice_loss(P, target, cfg: LossConfig = LossConfig()) -> Tensor:
    P = T.as_tensor(P)
    target = _check(P, target, "dice_loss")
    inter = T.sum_(T.mul(P, target))
    num = 2.0 * inter + cfg.dice_eps
    den = T.sum_(P) + (target.sum() + cfg.dice_eps)
    return 1.0 - num / den


def cd_loss(P, target, cfg: LossConfig = LossConfig()) -> Tensor:
    return weighted_bce(P, target, cfg) + dice_loss(P, target, cfg)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, gt) -> ConfusionMatrix:
    pred = np.asarray(pred) != 0
    gt = np.asarray(gt) != 0
    if pred.shape != gt.shape:
        raise ValueError(f"confusion: prediction shape {pred.shape} != ground truth shape {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionMatrix(tp, fp, fn, pred.size - tp - fp - fn)


def metrics(cm: ConfusionMatrix) -> dict[str, float]:
    """Precision, recall, F1, IoU and overall accuracy from pixel counts.

    A ratio whose denominator is zero is 1 when prediction and ground truth are
    both empty and 0 otherwise, so change-free scenes remain scoreable.
    """
    if cm.total <= 0:
        raise ValueError("metrics: empty confusion matrix")
    both_empty = cm.tp + cm.fp + cm.fn == 0
    empty = 1.0 if both_empty else 0.0
    precision = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else empty
    recall = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else empty
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    iou = cm.tp / (cm.tp + cm.fp + cm.fn) if not both_empty else 1.0
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "iou": iou,
        "oa": (cm.tp + cm.tn) / cm.total,
    }
