"""Grid/anchor target assignment.

Each instance goes to the cell containing its bbox center and, within that
cell, to the anchor prior with the best IoU against its (width, height).
All regression targets live in the assigned cell's frame:

  tx, ty  center offset within the cell, in [0, 1)
  tw, th  log ratio of box dims to the anchor prior
  sx, sy  stem offset from the cell's top-left, in cell units (unbounded)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .network import DetectorConfig
from .types import LabeledInstance

log = logging.getLogger(__name__)


@dataclass
class GridTarget:
    pos_mask: np.ndarray    # (..., S, S, B) bool
    class_idx: np.ndarray   # (..., S, S, B) int
    box_t: np.ndarray       # (..., S, S, B, 4)
    stem_t: np.ndarray      # (..., S, S, B, 2)
    weed_mask: np.ndarray   # (..., S, S, B) bool


def _anchor_iou(w: float, h: float, anchors) -> np.ndarray:
    aw = np.array([a[0] for a in anchors])
    ah = np.array([a[1] for a in anchors])
    inter = np.minimum(w, aw) * np.minimum(h, ah)
    union = w * h + aw * ah - inter
    return inter / union


def assign_targets(instances: Sequence[LabeledInstance], config: DetectorConfig) -> GridTarget:
    s, b = config.grid_size, config.num_anchors
    cs = config.cell_size
    tgt = GridTarget(
        pos_mask=np.zeros((s, s, b), dtype=bool),
        class_idx=np.zeros((s, s, b), dtype=np.int64),
        box_t=np.zeros((s, s, b, 4)),
        stem_t=np.zeros((s, s, b, 2)),
        weed_mask=np.zeros((s, s, b), dtype=bool),
    )
    owner_area = np.zeros((s, s, b))
    for inst in instances:
        cx, cy = inst.center
        gx = min(int(cx / cs), s - 1)
        gy = min(int(cy / cs), s - 1)
        a = int(np.argmax(_anchor_iou(inst.width, inst.height, config.anchors)))
        if tgt.pos_mask[gy, gx, a]:
            if inst.area <= owner_area[gy, gx, a]:
                log.warning("target collision at cell (%d,%d) anchor %d; dropping smaller instance", gy, gx, a)
                continue
            log.warning("target collision at cell (%d,%d) anchor %d; keeping larger instance", gy, gx, a)
        tgt.pos_mask[gy, gx, a] = True
        owner_area[gy, gx, a] = inst.area
        tgt.class_idx[gy, gx, a] = inst.class_id
        aw, ah = config.anchors[a]
        tgt.box_t[gy, gx, a] = (cx / cs - gx, cy / cs - gy, np.log(inst.width / aw), np.log(inst.height / ah))
        if inst.is_weed:
            tgt.weed_mask[gy, gx, a] = True
            sx, sy = inst.stem
            tgt.stem_t[gy, gx, a] = (sx / cs - gx, sy / cs - gy)
    return tgt


def stack_targets(targets: List[GridTarget]) -> GridTarget:
    return GridTarget(
        pos_mask=np.stack([t.pos_mask for t in targets]),
        class_idx=np.stack([t.class_idx for t in targets]),
        box_t=np.stack([t.box_t for t in targets]),
        stem_t=np.stack([t.stem_t for t in targets]),
        weed_mask=np.stack([t.weed_mask for t in targets]),
    )


def stem_cell_targets(instances: Sequence[LabeledInstance], config: DetectorConfig) -> GridTarget:
    """Detection-free variant: supervise stem offsets at the cell containing
    each weed stem (anchor 0), with no box/class positives at all."""
    s, b = config.grid_size, config.num_anchors
    cs = config.cell_size
    tgt = GridTarget(
        pos_mask=np.zeros((s, s, b), dtype=bool),
        class_idx=np.zeros((s, s, b), dtype=np.int64),
        box_t=np.zeros((s, s, b, 4)),
        stem_t=np.zeros((s, s, b, 2)),
        weed_mask=np.zeros((s, s, b), dtype=bool),
    )
    for inst in instances:
        if not inst.is_weed:
            continue
        sx, sy = inst.stem
        gx = min(int(sx / cs), s - 1)
        gy = min(int(sy / cs), s - 1)
        tgt.weed_mask[gy, gx, 0] = True
        tgt.stem_t[gy, gx, 0] = (sx / cs - gx, sy / cs - gy)
    return tgt


def encode_to_raw(target: GridTarget, config: DetectorConfig,
                  obj_logit: float = 12.0, neg_logit: float = -12.0,
                  class_logit: float = 10.0) -> np.ndarray:
    """Write a GridTarget into a raw grid tensor such that decode() recovers
    the encoded instances (targets-as-logits: tx/ty go through the logit
    transform since decode squashes them with a sigmoid)."""
    s, b = config.grid_size, config.num_anchors
    k = config.channels_per_anchor
    raw = np.zeros((s, s, b, k))
    raw[..., 0] = neg_logit
    pos = np.argwhere(target.pos_mask)
    for gy, gx, a in pos:
        raw[gy, gx, a, 0] = obj_logit
        tx, ty, tw, th = target.box_t[gy, gx, a]
        eps = 1e-9
        raw[gy, gx, a, 1] = np.log(np.clip(tx, eps, 1 - eps) / (1 - np.clip(tx, eps, 1 - eps)))
        raw[gy, gx, a, 2] = np.log(np.clip(ty, eps, 1 - eps) / (1 - np.clip(ty, eps, 1 - eps)))
        raw[gy, gx, a, 3] = tw
        raw[gy, gx, a, 4] = th
        raw[gy, gx, a, 5 + target.class_idx[gy, gx, a]] = class_logit
        if target.weed_mask[gy, gx, a]:
            raw[gy, gx, a, 5 + config.num_classes : 5 + config.num_classes + 2] = target.stem_t[gy, gx, a]
    return raw
