"""Detection losses, their weighted combination, and a gradient checker.

Loss composition: objectness binary cross-entropy over every anchor (with
down-weighted negatives) plus class cross-entropy over positives; squared
error on box offsets over positives; squared stem-offset distance over
weed positives only. Training uses the squared distance; the evaluation
module reports the unsquared one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .network import DetectorConfig, RawGridOutput
from .targets import GridTarget

DEFAULT_NEG_WEIGHT = 0.5


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2
    beta: float = 0.3
    gamma: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.alpha == 0 and self.beta == 0 and self.gamma == 0:
            raise ValidationError("at least one loss weight must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    l_cls: float
    l_bbox: float
    l_reg: float
    total: float
    n_pos: int
    n_weed: int

    def to_dict(self) -> dict:
        return {"l_cls": self.l_cls, "l_bbox": self.l_bbox, "l_reg": self.l_reg,
                "total": self.total, "n_pos": self.n_pos, "n_weed": self.n_weed}


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _grid_of(raw) -> np.ndarray:
    grid = raw.grid if isinstance(raw, RawGridOutput) else np.asarray(raw)
    if grid.ndim == 4:
        grid = grid[None]
    return grid


def _masks_of(target: GridTarget):
    pos = target.pos_mask[None] if target.pos_mask.ndim == 3 else target.pos_mask
    weed = target.weed_mask[None] if target.weed_mask.ndim == 3 else target.weed_mask
    cls = target.class_idx[None] if target.class_idx.ndim == 3 else target.class_idx
    box = target.box_t[None] if target.box_t.ndim == 4 else target.box_t
    stem = target.stem_t[None] if target.stem_t.ndim == 4 else target.stem_t
    return pos, weed, cls, box, stem


def stem_regression_loss(raw, target: GridTarget, config: DetectorConfig,
                         want_grad: bool = False):
    """Mean squared stem-offset distance over weed positives, cell units."""
    grid = _grid_of(raw)
    _, weed, _, _, stem_t = _masks_of(target)
    c = config.num_classes
    d_grid = np.zeros_like(grid) if want_grad else None
    n_weed = int(weed.sum())
    if n_weed == 0:
        return (0.0, d_grid) if want_grad else 0.0
    pred = grid[..., 5 + c : 5 + c + 2]
    diff = (pred - stem_t) * weed[..., None]
    loss = float(np.sum(diff**2) / n_weed)
    if want_grad:
        d_grid[..., 5 + c : 5 + c + 2] = 2.0 * diff / n_weed
        return loss, d_grid
    return loss


def classification_loss(raw, target: GridTarget, config: DetectorConfig,
                        neg_weight: float = DEFAULT_NEG_WEIGHT, want_grad: bool = False):
    """Objectness BCE over all anchors (negatives down-weighted) plus class
    cross-entropy over positives."""
    grid = _grid_of(raw)
    pos, _, cls_idx, _, _ = _masks_of(target)
    c = config.num_classes
    obj_logit = grid[..., 0]
    y = pos.astype(np.float64)
    w = np.where(pos, 1.0, neg_weight)
    n_total = obj_logit.size
    # stable BCE-with-logits
    bce = np.maximum(obj_logit, 0) - obj_logit * y + np.log1p(np.exp(-np.abs(obj_logit)))
    l_obj = float(np.sum(w * bce) / n_total)

    n_pos = int(pos.sum())
    d_grid = np.zeros_like(grid) if want_grad else None
    if want_grad:
        d_grid[..., 0] = w * (_sigmoid(obj_logit) - y) / n_total

    l_class = 0.0
    if n_pos > 0:
        logits = grid[..., 5 : 5 + c]
        z = logits - logits.max(axis=-1, keepdims=True)
        log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        picked = np.take_along_axis(log_probs, cls_idx[..., None], axis=-1)[..., 0]
        l_class = float(-np.sum(picked * pos) / n_pos)
        if want_grad:
            probs = np.exp(log_probs)
            onehot = np.zeros_like(probs)
            np.put_along_axis(onehot, cls_idx[..., None], 1.0, axis=-1)
            d_grid[..., 5 : 5 + c] = (probs - onehot) * pos[..., None] / n_pos

    loss = l_obj + l_class
    return (loss, d_grid) if want_grad else loss


def bbox_loss(raw, target: GridTarget, config: DetectorConfig, want_grad: bool = False):
    """MSE over the four box offsets at positive anchors. tx/ty predictions
    are squashed with a sigmoid to land in the cell like the targets."""
    grid = _grid_of(raw)
    pos, _, _, box_t, _ = _masks_of(target)
    d_grid = np.zeros_like(grid) if want_grad else None
    n_pos = int(pos.sum())
    if n_pos == 0:
        return (0.0, d_grid) if want_grad else 0.0
    raw_box = grid[..., 1:5]
    pred = np.concatenate([_sigmoid(raw_box[..., :2]), raw_box[..., 2:]], axis=-1)
    diff = (pred - box_t) * pos[..., None]
    loss = float(np.sum(diff**2) / (4 * n_pos))
    if want_grad:
        d_pred = 2.0 * diff / (4 * n_pos)
        sig = _sigmoid(raw_box[..., :2])
        d_grid[..., 1:3] = d_pred[..., :2] * sig * (1.0 - sig)
        d_grid[..., 3:5] = d_pred[..., 2:]
        return loss, d_grid
    return loss


def combined_loss(raw, target: GridTarget, weights: LossWeights, config: DetectorConfig,
                  neg_weight: float = DEFAULT_NEG_WEIGHT, want_grad: bool = False):
    """Weighted sum of the three losses; optionally also d total / d grid."""
    pos, weed, _, _, _ = _masks_of(target)
    if want_grad:
        l_cls, g_cls = classification_loss(raw, target, config, neg_weight, want_grad=True)
        l_bbox, g_bbox = bbox_loss(raw, target, config, want_grad=True)
        l_reg, g_reg = stem_regression_loss(raw, target, config, want_grad=True)
    else:
        l_cls = classification_loss(raw, target, config, neg_weight)
        l_bbox = bbox_loss(raw, target, config)
        l_reg = stem_regression_loss(raw, target, config)
    total = weights.alpha * l_cls + weights.beta * l_bbox + weights.gamma * l_reg
    breakdown = LossBreakdown(l_cls=l_cls, l_bbox=l_bbox, l_reg=l_reg, total=total,
                              n_pos=int(pos.sum()), n_weed=int(weed.sum()))
    if want_grad:
        d_grid = weights.alpha * g_cls + weights.beta * g_bbox + weights.gamma * g_reg
        return breakdown, d_grid
    return breakdown


def gradient_check(loss_fn, params: dict, probe_count: int = 50, epsilon: float = 1e-4,
                   seed: int = 0) -> float:
    """Max relative error between analytic gradients and central differences.

    loss_fn(params) must return (loss, grads) with grads keyed like params.
    """
    if not (1e-6 <= epsilon <= 1e-2):
        raise ValidationError("epsilon must be in [1e-6, 1e-2]")
    if probe_count < 1:
        raise ValidationError("probe_count must be >= 1")
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise NumericalError("loss is not finite")
    rng = np.random.default_rng(seed)
    keys = sorted(params.keys())
    sizes = np.array([params[k].size for k in keys])
    total = int(sizes.sum())
    max_err = 0.0
    for flat_idx in rng.choice(total, size=min(probe_count, total), replace=False):
        ki = int(np.searchsorted(np.cumsum(sizes), flat_idx, side="right"))
        key = keys[ki]
        local = int(flat_idx - (np.cumsum(sizes)[ki] - sizes[ki]))
        idx = np.unravel_index(local, params[key].shape)
        orig = params[key][idx]
        params[key][idx] = orig + epsilon
        lp, _ = loss_fn(params)
        params[key][idx] = orig - epsilon
        lm, _ = loss_fn(params)
        params[key][idx] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NumericalError("loss is not finite during probing")
        numeric = (lp - lm) / (2 * epsilon)
        analytic = grads[key][idx]
        denom = abs(numeric) if abs(numeric) > 1e-12 else abs(analytic)
        err = 0.0 if denom < 1e-12 else abs(analytic - numeric) / denom
        max_err = max(max_err, float(err))
    return max_err
