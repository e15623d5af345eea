"""Box geometry and the four grounding objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOG_EPS = 1e-12
BOX_EPS = 1e-9


@dataclass(frozen=True)
class BoundingBox:
    """Center-format box normalized to the image extent."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError("box width and height must be non-negative")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "BoundingBox":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


def center_to_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(boxes, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def box_iou_giou(a: np.ndarray, b: np.ndarray):
    """IoU, GIoU and a degenerate flag for corner-format boxes (..., 4).

    Where both boxes have zero area GIoU is reported as 0 and the flag is set.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    iou = inter / np.maximum(union, BOX_EPS)
    hull = ((np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0]))
            * (np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])))
    giou = iou - (hull - union) / np.maximum(hull, BOX_EPS)
    degenerate = (area_a <= 0) & (area_b <= 0)
    giou = np.where(degenerate, 0.0, giou)
    return iou, giou, degenerate


def giou(a: BoundingBox, b: BoundingBox) -> tuple[float, bool]:
    """Generalized IoU of two boxes and whether both were degenerate."""
    _, g, deg = box_iou_giou(np.array(a.corners()), np.array(b.corners()))
    return float(g), bool(deg)


def iou_center(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU for center-format arrays (..., 4)."""
    iou, _, _ = box_iou_giou(center_to_corners(a), center_to_corners(b))
    return iou


# -- differentiable objectives, batched over the leading axis --------------------

def _as_target(x, like: Tensor) -> np.ndarray:
    return np.asarray(x, dtype=like.dtype)


def ce_loss(logits: Tensor, onehot) -> Tensor:
    """-(1/N_c) * sum_i Y_i log softmax(logits)_i, per row."""
    y = _as_target(onehot, logits)
    n_c = logits.shape[-1]
    probs = T.clamp_min(T.softmax_rows(logits), LOG_EPS)
    return T.scale((T.log(probs) * y).sum(axis=-1), -1.0 / n_c)


def weighted_bce_loss(logits: Tensor, labels) -> Tensor:
    """Positive and negative log-likelihoods, each averaged over its own label count.

    A side with no labels contributes nothing.
    """
    y = _as_target(labels, logits)
    pos = y.sum(axis=-1, keepdims=True)
    neg = y.shape[-1] - pos
    w_pos = y / np.maximum(pos, 1)
    w_neg = (1 - y) / np.maximum(neg, 1)
    log_p = T.log(T.clamp_min(T.sigmoid(logits), LOG_EPS))
    log_q = T.log(T.clamp_min(T.sigmoid(-logits), LOG_EPS))
    return -((log_p * w_pos).sum(axis=-1) + (log_q * w_neg).sum(axis=-1))


def l1_loss(target, pred: Tensor) -> Tensor:
    b = _as_target(target, pred)
    return T.abs_(pred - b).sum(axis=-1)


def giou_loss(target, pred: Tensor) -> Tensor:
    """1 - GIoU for center-format (..., 4) boxes."""
    b = _as_target(target, pred)
    tx1, ty1 = b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2
    tx2, ty2 = b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2
    cx, cy, w, h = (pred[..., i] for i in range(4))
    px1, py1 = cx - w * 0.5, cy - h * 0.5
    px2, py2 = cx + w * 0.5, cy + h * 0.5
    iw = T.clamp_min(T.minimum(px2, tx2) - T.maximum(px1, tx1), 0.0)
    ih = T.clamp_min(T.minimum(py2, ty2) - T.maximum(py1, ty1), 0.0)
    inter = iw * ih
    union = w * h + (tx2 - tx1) * (ty2 - ty1) - inter
    iou = inter / T.maximum(union, BOX_EPS)
    hull = (T.maximum(px2, tx2) - T.minimum(px1, tx1)) * (T.maximum(py2, ty2) - T.minimum(py1, ty1))
    g = iou - (hull - union) / T.maximum(hull, BOX_EPS)
    return 1.0 - g


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0
    bce: float = 10.0
    l1: float = 5.0
    giou: float = 2.0

    def __post_init__(self):
        for name in ("ce", "bce", "l1", "giou"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")

    @classmethod
    def from_config(cls, cfg) -> "LossWeights":
        return cls(cfg.lambda_ce, cfg.lambda_bce, cfg.lambda_l1, cfg.lambda_giou)


def combine(terms: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum of per-term losses; zero-weight terms are left out of the graph."""
    total = None
    for name in ("ce", "bce", "l1", "giou"):
        lam = getattr(weights, name)
        if lam == 0:
            continue
        part = terms[name] if lam == 1 else T.scale(terms[name], lam)
        total = part if total is None else total + part
    if total is None:
        ref = terms["l1"]
        total = T.scale(ref, 0.0)
    return total


def total_loss(box: Tensor, category_logits: Tensor, attribute_logits: Tensor,
               target_box, category_onehot, attributes,
               weights: LossWeights = LossWeights()) -> tuple[Tensor, dict[str, float]]:
    """Batch-mean weighted loss and the batch-mean value of every term."""
    terms = {
        "ce": ce_loss(category_logits, category_onehot).mean(),
        "bce": weighted_bce_loss(attribute_logits, attributes).mean(),
        "l1": l1_loss(target_box, box).mean(),
        "giou": giou_loss(target_box, box).mean(),
    }
    loss = combine(terms, weights)
    breakdown = {k: float(v.data) for k, v in terms.items()}
    breakdown["total"] = float(loss.data)
    return loss, breakdown
