"""Decode raw grid outputs into predictions; embedding extraction."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from . import backends
from .errors import ValidationError
from .network import DetectorConfig, RawGridOutput
from .types import ImageSample, WEED_CLASS_ID

DEFAULT_NMS_IOU = 0.45


@dataclass(frozen=True)
class Prediction:
    class_id: int
    confidence: float
    bbox: Tuple[float, float, float, float]
    stem: Optional[Tuple[float, float]] = None
    embedding: Optional[np.ndarray] = None
    class_probs: Optional[np.ndarray] = None

    @property
    def is_weed(self) -> bool:
        return self.class_id == WEED_CLASS_ID


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _pool_embedding(features: np.ndarray, bbox, config: DetectorConfig) -> np.ndarray:
    """Average feature vectors over grid cells overlapped by the box."""
    s = config.grid_size
    cs = config.cell_size
    x0, y0, x1, y1 = bbox
    gx0 = int(np.clip(np.floor(x0 / cs), 0, s - 1))
    gy0 = int(np.clip(np.floor(y0 / cs), 0, s - 1))
    gx1 = int(np.clip(np.ceil(x1 / cs) - 1, 0, s - 1))
    gy1 = int(np.clip(np.ceil(y1 / cs) - 1, 0, s - 1))
    if gx1 < gx0:
        gx1 = gx0
    if gy1 < gy0:
        gy1 = gy0
    return features[gy0 : gy1 + 1, gx0 : gx1 + 1].reshape(-1, features.shape[-1]).mean(axis=0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> List[int]:
    """Greedy descending-score suppression; returns kept indices."""
    order = np.argsort(-scores, kind="stable")
    keep: List[int] = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    ious = backends.iou_matrix(boxes, boxes) if len(boxes) else None
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > iou_threshold
        suppressed[i] = True
    return keep


def decode(raw: RawGridOutput, config: DetectorConfig, conf_threshold: float,
           nms_iou: float = DEFAULT_NMS_IOU) -> List[Prediction]:
    """Threshold on objectness * best-class probability, then per-class NMS."""
    if not (0.0 <= conf_threshold <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ValidationError("conf_threshold and nms_iou must be in [0, 1]")
    grid = raw.grid
    s, b = config.grid_size, config.num_anchors
    c = config.num_classes
    cs = config.cell_size

    obj = _sigmoid(grid[..., 0])
    cls_probs = _softmax(grid[..., 5 : 5 + c])
    best_cls = np.argmax(cls_probs, axis=-1)
    best_prob = np.max(cls_probs, axis=-1)
    score = obj * best_prob

    cand = np.argwhere(score >= conf_threshold)
    preds: List[Prediction] = []
    boxes = []
    for gy, gx, a in cand:
        g = grid[gy, gx, a]
        aw, ah = config.anchors[a]
        cx = (gx + _sigmoid(g[1])) * cs
        cy = (gy + _sigmoid(g[2])) * cs
        w = aw * np.exp(np.clip(g[3], -8.0, 8.0))
        h = ah * np.exp(np.clip(g[4], -8.0, 8.0))
        x0 = float(np.clip(cx - w / 2, 0, config.input_size))
        y0 = float(np.clip(cy - h / 2, 0, config.input_size))
        x1 = float(np.clip(cx + w / 2, 0, config.input_size))
        y1 = float(np.clip(cy + h / 2, 0, config.input_size))
        if x1 <= x0 or y1 <= y0:
            continue
        cls_id = int(best_cls[gy, gx, a])
        stem = None
        if cls_id == WEED_CLASS_ID:
            sx = (gx + g[5 + c]) * cs
            sy = (gy + g[5 + c + 1]) * cs
            stem = (float(np.clip(sx, 0, config.input_size)), float(np.clip(sy, 0, config.input_size)))
        preds.append(Prediction(
            class_id=cls_id,
            confidence=float(score[gy, gx, a]),
            bbox=(x0, y0, x1, y1),
            stem=stem,
            embedding=None,
            class_probs=cls_probs[gy, gx, a].copy(),
        ))
        boxes.append((x0, y0, x1, y1))

    if not preds:
        return []
    boxes = np.asarray(boxes)
    scores = np.asarray([p.confidence for p in preds])
    kept: List[Prediction] = []
    for cls_id in sorted({p.class_id for p in preds}):
        idx = [i for i, p in enumerate(preds) if p.class_id == cls_id]
        sel = nms(boxes[idx], scores[idx], nms_iou)
        kept.extend(preds[idx[i]] for i in sel)
    kept.sort(key=lambda p: -p.confidence)
    return [replace(p, embedding=_pool_embedding(raw.features, p.bbox, config)) for p in kept]


def extract_gt_embeddings(sample: ImageSample, raw: RawGridOutput,
                          config: DetectorConfig) -> List[tuple]:
    """One pooled embedding per ground-truth weed box."""
    if not sample.labeled:
        raise ValidationError("embedding extraction requires a labeled sample")
    out = []
    for inst in sample.instances:
        if not inst.is_weed:
            continue
        out.append((inst, _pool_embedding(raw.features, inst.bbox, config)))
    return out
