"""Training loops (supervised and teacher-student), optimizers, dataset
splitting, anchor priors, and model evaluation helpers."""
from __future__ import annotations

import json
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .augment import apply_augmentation, sample_recipe
from .decode import decode
from .errors import ConfigError, DataError, ValidationError
from .evaluation import LaserModel, MetricsReport, evaluate_detections
from .losses import LossBreakdown, LossWeights, combined_loss
from .network import (DetectorConfig, Params, RawGridOutput, backward_batch,
                      forward, forward_batch, normalize_image)
from .ssl import SSLConfig, ema_update
from .targets import assign_targets, stack_targets, stem_cell_targets
from .types import ImageSample


class SGD:
    def __init__(self, lr: float = 1e-3, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self._vel: Dict[str, np.ndarray] = {}

    def step(self, params: Params, grads: Params) -> None:
        for k in params:
            v = self._vel.get(k)
            v = grads[k] if v is None else self.momentum * v + grads[k]
            self._vel[k] = v
            params[k] -= self.lr * v


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: Params, grads: Params) -> None:
        self._t += 1
        b1t = 1 - self.beta1**self._t
        b2t = 1 - self.beta2**self._t
        for k in params:
            g = grads[k]
            self._m[k] = self.beta1 * self._m.get(k, 0.0) + (1 - self.beta1) * g
            self._v[k] = self.beta2 * self._v.get(k, 0.0) + (1 - self.beta2) * g * g
            params[k] -= self.lr * (self._m[k] / b1t) / (np.sqrt(self._v[k] / b2t) + self.eps)


def make_optimizer(kind: str, lr: float, momentum: float = 0.9):
    if kind == "sgd":
        return SGD(lr=lr, momentum=momentum)
    if kind == "adam":
        return Adam(lr=lr)
    raise ConfigError(f"unknown optimizer {kind!r}")


def _prepare(sample: ImageSample, det_cfg: DetectorConfig, rng, augment_kind: Optional[str],
             regression_only: bool):
    if sample.height != det_cfg.input_size or sample.width != det_cfg.input_size:
        raise ConfigError(
            f"sample {sample.id} is {sample.width}x{sample.height}, "
            f"detector expects {det_cfg.input_size}"
        )
    if augment_kind is not None:
        recipe = sample_recipe(augment_kind, rng, sample.width, sample.height)
        sample, _ = apply_augmentation(sample, recipe)
    target_fn = stem_cell_targets if regression_only else assign_targets
    return normalize_image(sample.image), target_fn(sample.instances, det_cfg)


def train_loop(labeled: Sequence[ImageSample], pseudo: Sequence[ImageSample], params: Params,
               det_cfg: DetectorConfig, weights: LossWeights, optimizer, steps: int,
               batch_size: int, rng: np.random.Generator,
               unlabeled_batch_ratio: float = 0.0,
               augment_kind: Optional[str] = "weak",
               regression_only: bool = False,
               teacher_params: Optional[Params] = None,
               ema_momentum: float = 0.9,
               loss_log=None) -> Tuple[Params, Optional[Params], List[LossBreakdown]]:
    """Shared optimization core. With no pseudo data and no teacher this is
    plain supervised training; the RNG stream is identical either way, so an
    unlabeled_batch_ratio of 0 reproduces the supervised run bit-for-bit."""
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    if not labeled:
        raise DataError("training requires at least one labeled sample")
    history: List[LossBreakdown] = []
    n_pseudo = int(round(unlabeled_batch_ratio * batch_size)) if pseudo else 0
    for step in range(steps):
        idx = rng.integers(0, len(labeled), size=min(batch_size, len(labeled)))
        chosen = [labeled[i] for i in idx]
        if n_pseudo > 0:
            pidx = rng.integers(0, len(pseudo), size=n_pseudo)
            chosen.extend(pseudo[i] for i in pidx)
        images, targets = [], []
        for s in chosen:
            img, tgt = _prepare(s, det_cfg, rng, augment_kind, regression_only)
            images.append(img)
            targets.append(tgt)
        batch = np.stack(images)
        target = stack_targets(targets)
        raw, cache = forward_batch(batch, params, det_cfg, want_cache=True)
        breakdown, d_grid = combined_loss(raw, target, weights, det_cfg, want_grad=True)
        grads = backward_batch(d_grid, params, det_cfg, cache)
        optimizer.step(params, grads)
        if teacher_params is not None:
            new_teacher = ema_update(teacher_params, params, ema_momentum)
            for k in teacher_params:
                teacher_params[k] = new_teacher[k]
        history.append(breakdown)
        if loss_log is not None:
            loss_log.write(json.dumps({"step": step, **breakdown.to_dict()}) + "\n")
    return params, teacher_params, history


def train_supervised(samples: Sequence[ImageSample], params: Params, det_cfg: DetectorConfig,
                     weights: LossWeights, optimizer, steps: int, batch_size: int,
                     rng: np.random.Generator, regression_only: bool = False,
                     augment_kind: Optional[str] = "weak",
                     loss_log=None) -> Tuple[Params, List[LossBreakdown]]:
    params, _, history = train_loop(
        samples, [], params, det_cfg, weights, optimizer, steps, batch_size, rng,
        augment_kind=augment_kind, regression_only=regression_only, loss_log=loss_log,
    )
    return params, history


def train_student(labeled: Sequence[ImageSample], pseudo: Sequence[ImageSample],
                  student_params: Params, teacher_params: Params, cfg: SSLConfig,
                  weights: LossWeights, steps: int, det_cfg: DetectorConfig,
                  optimizer, batch_size: int, rng: np.random.Generator,
                  loss_log=None) -> Tuple[Params, Params, List[LossBreakdown]]:
    """Mixed labeled + pseudo batches on the student pathway, EMA-updating the
    teacher after every student step."""
    student_kind = "weak" if cfg.augmentation_routing == "paper" else "strong"
    return train_loop(
        labeled, list(pseudo), student_params, det_cfg, weights, optimizer, steps,
        batch_size, rng, unlabeled_batch_ratio=cfg.unlabeled_batch_ratio,
        augment_kind=student_kind, teacher_params=teacher_params,
        ema_momentum=cfg.ema_momentum, loss_log=loss_log,
    )


# ---------------------------------------------------------------------------
# evaluation over samples
# ---------------------------------------------------------------------------

def raw_outputs_for(params: Params, samples: Sequence[ImageSample],
                    det_cfg: DetectorConfig) -> List[RawGridOutput]:
    return [forward(normalize_image(s.image), params, det_cfg) for s in samples]


def predictions_for(params: Params, samples: Sequence[ImageSample], det_cfg: DetectorConfig,
                    conf_threshold: float = 0.15, nms_iou: float = 0.45) -> List[list]:
    return [decode(raw, det_cfg, conf_threshold, nms_iou)
            for raw in raw_outputs_for(params, samples, det_cfg)]


def evaluate_model(params: Params, samples: Sequence[ImageSample], det_cfg: DetectorConfig,
                   conf_threshold: float = 0.15, nms_iou: float = 0.45,
                   iou_floor: float = 0.3, laser: Optional[LaserModel] = None) -> MetricsReport:
    preds = predictions_for(params, samples, det_cfg, conf_threshold, nms_iou)
    truths = [s.instances for s in samples]
    return evaluate_detections(preds, truths, laser=laser, iou_floor=iou_floor,
                               cell_size=det_cfg.cell_size)


def evaluate_regression_only(params: Params, samples: Sequence[ImageSample],
                             det_cfg: DetectorConfig) -> Optional[float]:
    """Detection-free stem evaluation: for each ground-truth weed, read the
    stem offset predicted at the cell holding the weed's bbox center."""
    cs = det_cfg.cell_size
    c = det_cfg.num_classes
    dists = []
    for sample in samples:
        raw = forward(normalize_image(sample.image), params, det_cfg)
        for inst in sample.instances:
            if not inst.is_weed:
                continue
            cx, cy = inst.center
            gx = min(int(cx / cs), det_cfg.grid_size - 1)
            gy = min(int(cy / cs), det_cfg.grid_size - 1)
            sx = (gx + raw.grid[gy, gx, 0, 5 + c]) * cs
            sy = (gy + raw.grid[gy, gx, 0, 5 + c + 1]) * cs
            dists.append(float(np.hypot(sx - inst.stem[0], sy - inst.stem[1])))
    return float(np.mean(dists)) if dists else None


# ---------------------------------------------------------------------------
# dataset splitting and anchor priors
# ---------------------------------------------------------------------------

def split_dataset(samples: Sequence[ImageSample], fractions: Tuple[float, float, float],
                  seed: int) -> Tuple[list, list, list]:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("split fractions must sum to 1")
    n = len(samples)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train : n_train + n_val]]
    test = [samples[i] for i in order[n_train + n_val :]]
    return train, val, test


def _wh_iou(wh: np.ndarray, centers: np.ndarray) -> np.ndarray:
    inter = np.minimum(wh[:, None, 0], centers[None, :, 0]) * np.minimum(wh[:, None, 1], centers[None, :, 1])
    union = wh[:, None, 0] * wh[:, None, 1] + centers[None, :, 0] * centers[None, :, 1] - inter
    return inter / union


def compute_anchors(samples: Sequence[ImageSample], k: int, seed: int = 0,
                    iterations: int = 50) -> List[Tuple[float, float]]:
    """K-means over box (width, height) with IoU distance."""
    wh = np.array([[inst.width, inst.height] for s in samples for inst in s.instances])
    if len(wh) < k:
        raise DataError(f"need at least {k} boxes, found {len(wh)}")
    rng = np.random.default_rng(seed)
    centers = wh[rng.choice(len(wh), size=k, replace=False)].astype(np.float64)
    for _ in range(iterations):
        assign = np.argmax(_wh_iou(wh, centers), axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = wh[assign == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
        if np.allclose(new_centers, centers):
            break
        centers = new_centers
    order = np.argsort(centers[:, 0] * centers[:, 1])
    return [(float(w), float(h)) for w, h in centers[order]]
