"""Matching-based evaluation: stem distance, FP rate, laser-shot simulation,
threshold sweeps, and the bbox-center baseline."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import backends
from .decode import Prediction, decode
from .network import DetectorConfig, RawGridOutput
from .types import LabeledInstance, WEED_CLASS_ID

DEFAULT_IOU_FLOOR = 0.3
_BIG = 1e9  # infeasible/dummy assignment cost; dwarfs any summed pixel distance


@dataclass(frozen=True)
class MatchingResult:
    pairs: Tuple[Tuple[int, int], ...]      # (prediction index, truth index)
    unmatched_predictions: Tuple[int, ...]
    unmatched_truths: Tuple[int, ...]
    iou_floor: float


@dataclass(frozen=True)
class LaserModel:
    kill_radius: float
    max_shots_per_target: int = 1

    def __post_init__(self):
        if self.kill_radius <= 0:
            raise ValueError("kill_radius must be positive")
        if self.max_shots_per_target < 1:
            raise ValueError("max_shots_per_target must be >= 1")


@dataclass(frozen=True)
class ShotRecord:
    point: Tuple[float, float]
    hit: bool
    target_id: int  # truth index killed by this shot, -1 on miss


@dataclass
class MetricsReport:
    mean_dist: Optional[float]          # pixels, matched weed pairs only
    mean_dist_cells: Optional[float]    # normalized by detector cell size
    fp_rate: float
    weeding_accuracy: Optional[float]
    energy_cost: Optional[float]
    n_weeds: int = 0
    n_crops: int = 0
    n_shots: int = 0
    n_kills: int = 0
    n_matched_weeds: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _pair_cost(pred: Prediction, truth: LabeledInstance) -> float:
    """Stem distance for weed pairs, box-center distance otherwise."""
    if truth.is_weed and pred.stem is not None:
        dx = pred.stem[0] - truth.stem[0]
        dy = pred.stem[1] - truth.stem[1]
    else:
        pcx, pcy = 0.5 * (pred.bbox[0] + pred.bbox[2]), 0.5 * (pred.bbox[1] + pred.bbox[3])
        dx, dy = pcx - truth.center[0], pcy - truth.center[1]
    return float(np.hypot(dx, dy))


def match_cost_matrix(predictions: Sequence[Prediction], truths: Sequence[LabeledInstance],
                      iou_floor: float) -> np.ndarray:
    """Square padded cost matrix: feasible pairs carry their distance cost,
    everything else (IoU below floor, dummy rows/cols) carries _BIG, so the
    minimum-cost assignment matches as many feasible pairs as possible first."""
    np_, nt = len(predictions), len(truths)
    n = max(np_, nt, 1)
    cost = np.full((n, n), _BIG)
    if np_ and nt:
        ious = backends.iou_matrix(
            np.asarray([p.bbox for p in predictions], dtype=np.float64),
            np.asarray([t.bbox for t in truths], dtype=np.float64),
        )
        for i in range(np_):
            for j in range(nt):
                if ious[i, j] >= iou_floor:
                    cost[i, j] = _pair_cost(predictions[i], truths[j])
    return cost


def match(predictions: Sequence[Prediction], truths: Sequence[LabeledInstance],
          iou_floor: float = DEFAULT_IOU_FLOOR) -> MatchingResult:
    """Optimal one-to-one assignment (max feasible pairs, then min summed cost)."""
    cost = match_cost_matrix(predictions, truths, iou_floor)
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple(
        (int(i), int(j))
        for i, j in zip(rows, cols)
        if i < len(predictions) and j < len(truths) and cost[i, j] < _BIG
    )
    matched_p = {i for i, _ in pairs}
    matched_t = {j for _, j in pairs}
    return MatchingResult(
        pairs=tuple(sorted(pairs)),
        unmatched_predictions=tuple(i for i in range(len(predictions)) if i not in matched_p),
        unmatched_truths=tuple(j for j in range(len(truths)) if j not in matched_t),
        iou_floor=iou_floor,
    )


def dist_metric(matching: MatchingResult, predictions: Sequence[Prediction],
                truths: Sequence[LabeledInstance]) -> Optional[float]:
    """Mean Euclidean stem distance over matched weed pairs; None if there are none."""
    dists = [
        _pair_cost(predictions[i], truths[j])
        for i, j in matching.pairs
        if truths[j].is_weed and predictions[i].stem is not None
    ]
    return float(np.mean(dists)) if dists else None


def fp_rate(matching: MatchingResult, predictions: Sequence[Prediction],
            truths: Sequence[LabeledInstance]) -> float:
    """Fraction of crop ground truths whose matched prediction is weed-class."""
    n_crops = sum(1 for t in truths if not t.is_weed)
    if n_crops == 0:
        return 0.0
    n_fp = sum(
        1 for i, j in matching.pairs
        if not truths[j].is_weed and predictions[i].class_id == WEED_CLASS_ID
    )
    return n_fp / n_crops


_RETRY_ANGLES = np.linspace(0.0, 2 * np.pi, 8, endpoint=False)


def simulate_weeding(predictions: Sequence[Prediction], truths: Sequence[LabeledInstance],
                     laser: LaserModel):
    """Fire one shot per weed-class prediction at its stem; retries (when the
    model allows more than one shot per target) dither on a ring of radius
    kill_radius around the aim point. Returns (accuracy, cost, shot log)."""
    weed_truths = [(j, t) for j, t in enumerate(truths) if t.is_weed]
    alive = {j for j, _ in weed_truths}
    shots: List[ShotRecord] = []
    for pred in predictions:
        if pred.stem is None:
            continue
        ax, ay = pred.stem
        for k in range(laser.max_shots_per_target):
            if k == 0:
                px, py = ax, ay
            else:
                ang = _RETRY_ANGLES[(k - 1) % len(_RETRY_ANGLES)]
                px = ax + laser.kill_radius * np.cos(ang)
                py = ay + laser.kill_radius * np.sin(ang)
            killed = [
                j for j, t in weed_truths
                if j in alive and np.hypot(px - t.stem[0], py - t.stem[1]) <= laser.kill_radius
            ]
            alive.difference_update(killed)
            shots.append(ShotRecord((float(px), float(py)), bool(killed),
                                    killed[0] if killed else -1))
            if killed:
                break
    n_weeds = len(weed_truths)
    n_kills = n_weeds - len(alive)
    if n_weeds == 0:
        return None, None, shots
    return n_kills / n_weeds, len(shots) / n_weeds, shots


def default_kill_radius(truth_sets: Sequence[Sequence[LabeledInstance]]) -> float:
    """0.1 x mean weed bbox diagonal over the evaluation set."""
    diags = [
        np.hypot(t.width, t.height)
        for truths in truth_sets
        for t in truths
        if t.is_weed
    ]
    if not diags:
        raise ValueError("no weeds in the evaluation set")
    return 0.1 * float(np.mean(diags))


def bbox_center_baseline(predictions: Sequence[Prediction]) -> List[Prediction]:
    """Replace each weed stem with its bbox center (the vanilla-detection aim)."""
    out = []
    for p in predictions:
        if p.is_weed:
            cx = 0.5 * (p.bbox[0] + p.bbox[2])
            cy = 0.5 * (p.bbox[1] + p.bbox[3])
            out.append(replace(p, stem=(cx, cy)))
        else:
            out.append(p)
    return out


def evaluate_detections(predictions_per_image: Sequence[Sequence[Prediction]],
                        truths_per_image: Sequence[Sequence[LabeledInstance]],
                        laser: Optional[LaserModel] = None,
                        iou_floor: float = DEFAULT_IOU_FLOOR,
                        cell_size: Optional[float] = None) -> MetricsReport:
    """Pooled metrics over an evaluation set."""
    if laser is None:
        laser = LaserModel(kill_radius=default_kill_radius(truths_per_image))
    dist_sum, dist_n = 0.0, 0
    crop_total, crop_fp = 0, 0
    weeds_total, shots_total, kills_total = 0, 0, 0
    for preds, truths in zip(predictions_per_image, truths_per_image):
        m = match(preds, truths, iou_floor)
        for i, j in m.pairs:
            if truths[j].is_weed and preds[i].stem is not None:
                dist_sum += _pair_cost(preds[i], truths[j])
                dist_n += 1
            elif not truths[j].is_weed and preds[i].class_id == WEED_CLASS_ID:
                crop_fp += 1
        crop_total += sum(1 for t in truths if not t.is_weed)
        acc, cost, shots = simulate_weeding(preds, truths, laser)
        weeds_total += sum(1 for t in truths if t.is_weed)
        shots_total += len(shots)
        kills_total += sum(1 for s in shots if s.hit)
    mean_dist = dist_sum / dist_n if dist_n else None
    return MetricsReport(
        mean_dist=mean_dist,
        mean_dist_cells=(mean_dist / cell_size) if (mean_dist is not None and cell_size) else None,
        fp_rate=crop_fp / crop_total if crop_total else 0.0,
        weeding_accuracy=kills_total / weeds_total if weeds_total else None,
        energy_cost=shots_total / weeds_total if weeds_total else None,
        n_weeds=weeds_total,
        n_crops=crop_total,
        n_shots=shots_total,
        n_kills=kills_total,
        n_matched_weeds=dist_n,
    )


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    fp_rate: float
    mean_dist: Optional[float]
    n_predictions: int
    n_matched_weeds: int


def threshold_sweep(raw_outputs: Sequence[RawGridOutput],
                    truths_per_image: Sequence[Sequence[LabeledInstance]],
                    thresholds: Sequence[float], config: DetectorConfig,
                    nms_iou: float = 0.45,
                    iou_floor: float = DEFAULT_IOU_FLOOR) -> List[SweepRow]:
    """Decode and evaluate at each confidence threshold (ascending)."""
    thresholds = list(thresholds)
    if thresholds != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    rows = []
    for t in thresholds:
        preds_per_img = [decode(raw, config, t, nms_iou) for raw in raw_outputs]
        dist_sum, dist_n = 0.0, 0
        crop_total, crop_fp, n_pred = 0, 0, 0
        for preds, truths in zip(preds_per_img, truths_per_image):
            n_pred += len(preds)
            m = match(preds, truths, iou_floor)
            for i, j in m.pairs:
                if truths[j].is_weed and preds[i].stem is not None:
                    dist_sum += _pair_cost(preds[i], truths[j])
                    dist_n += 1
                elif not truths[j].is_weed and preds[i].class_id == WEED_CLASS_ID:
                    crop_fp += 1
            crop_total += sum(1 for tr in truths if not tr.is_weed)
        rows.append(SweepRow(
            threshold=float(t),
            fp_rate=crop_fp / crop_total if crop_total else 0.0,
            mean_dist=dist_sum / dist_n if dist_n else None,
            n_predictions=n_pred,
            n_matched_weeds=dist_n,
        ))
    return rows
