"""Focal heatmap loss, L1 size/offset losses and the two-hourglass objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .targets import stack_targets
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 2.0
    beta: float = 4.0
    lambda_b: float = 1.0
    lambda_o: float = 0.1
    eps: float = 1e-7

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.lambda_b < 0 or self.lambda_o < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.eps < 0.5:
            raise ValueError(f"eps must lie in (0, 0.5), got {self.eps}")


class LossParts(NamedTuple):
    heat: Tensor
    size: Tensor
    offset: Tensor


def heatmap_focal_loss(pred: Tensor, targets, cfg: LossConfig = LossConfig()) -> Tensor:
    """Penalty-reduced focal loss over every heatmap cell, normalised by the keypoint count.

    Keypoint cells (target exactly 1) contribute ``(1-p)^alpha log p``; all other
    cells contribute ``(1-y)^beta p^alpha log(1-p)``.
    """
    if isinstance(targets, np.ndarray):
        y = targets.astype(np.float64)
    else:
        y = stack_targets(targets).heatmap
    if pred.shape != y.shape:
        raise ShapeError(f"heatmap_focal_loss: prediction {pred.shape} vs target {y.shape}")
    pos = (y == 1.0).astype(np.float64)
    neg_weight = (1.0 - pos) * (1.0 - y) ** cfg.beta
    n = max(int(pos.sum()), 1)

    p = T.clamp(pred, cfg.eps, 1.0 - cfg.eps)
    one_minus_p = T.sub(Tensor(np.ones(p.shape)), p)
    pos_term = T.mul(T.power(one_minus_p, cfg.alpha), T.log(p))
    neg_term = T.mul(T.power(p, cfg.alpha), T.log(one_minus_p))
    total = T.add(T.tsum(T.mul(pos_term, Tensor(pos))), T.tsum(T.mul(neg_term, Tensor(neg_weight))))
    return T.mul(total, -1.0 / n)


def _masked_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray, what: str) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"{what}: prediction {pred.shape} vs target {target.shape}")
    n = int(mask.sum())
    if n == 0:
        return T.mul(T.tsum(pred), 0.0)
    wide = np.repeat(mask, target.shape[1], axis=1)
    diff = T.absolute(T.sub(pred, Tensor(target)))
    return T.mul(T.tsum(T.mul(diff, Tensor(wide))), 1.0 / n)


def size_loss(pred: Tensor, targets) -> Tensor:
    """Mean over keypoints of |w_hat - w| + |h_hat - h|."""
    tb = stack_targets(targets)
    return _masked_l1(pred, tb.size_map, tb.mask, "size_loss")


def offset_loss(pred: Tensor, targets) -> Tensor:
    """Mean over keypoints of the L1 distance to the stored sub-cell offsets."""
    tb = stack_targets(targets)
    return _masked_l1(pred, tb.offset_map, tb.mask, "offset_loss")


def detection_losses(preds, targets, cfg: LossConfig = LossConfig()) -> LossParts:
    tb = stack_targets(targets)
    return LossParts(
        heatmap_focal_loss(preds.heat, tb, cfg),
        size_loss(preds.size, tb),
        offset_loss(preds.offset, tb),
    )


def combine_losses(lr: LossParts | tuple, hr: LossParts | tuple, cfg: LossConfig = LossConfig()):
    """Weighted sum of both heads; works on Tensors or plain floats."""

    def branch(parts):
        h, b, o = parts
        return h + b * cfg.lambda_b + o * cfg.lambda_o

    return branch(lr) + branch(hr)


def total_loss(lr_preds, hr_preds, lr_targets, hr_targets, cfg: LossConfig = LossConfig()) -> Tensor:
    return combine_losses(
        detection_losses(lr_preds, lr_targets, cfg),
        detection_losses(hr_preds, hr_targets, cfg),
        cfg,
    )
