"""Teacher-student semi-supervised machinery: weed bank, confidence and
similarity gating, EMA teacher updates, pseudo-label generation and caching."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .augment import apply_augmentation, sample_recipe
from .decode import Prediction, decode, extract_gt_embeddings
from .errors import ConfigError, EmptyBankError, ValidationError
from .network import DetectorConfig, forward, normalize_image
from .types import ImageSample, LabeledInstance, WEED_CLASS_ID


@dataclass(frozen=True)
class SSLConfig:
    tau: float = 0.5                  # classification confidence threshold
    xi: float = 0.4                   # weed-bank cosine similarity threshold
    ema_momentum: float = 0.9
    unlabeled_batch_ratio: float = 1.0
    bank_capacity: int = 4096
    augmentation_routing: str = "paper"  # paper: strong->teacher, weak->student
    on_empty_bank: str = "error"         # "error" | "skip"

    def __post_init__(self):
        if not (0.0 < self.tau <= 1.0):
            # 1.0 is allowed as an explicit "accept nothing" setting: max
            # softmax over finite logits is always strictly below 1
            raise ValidationError("tau must be in (0, 1]")
        if not (-1.0 < self.xi < 1.0):
            raise ValidationError("xi must be in (-1, 1)")
        if not (0.0 <= self.ema_momentum < 1.0):
            raise ValidationError("ema_momentum must be in [0, 1)")
        if self.augmentation_routing not in ("paper", "conventional"):
            raise ValidationError("augmentation_routing must be 'paper' or 'conventional'")
        if self.on_empty_bank not in ("error", "skip"):
            raise ValidationError("on_empty_bank must be 'error' or 'skip'")


class WeedBank:
    """Capacity-bounded store of ground-truth weed embeddings.

    Overflow is handled with reservoir sampling so the kept set stays an
    unbiased sample of everything offered."""

    def __init__(self, capacity: int = 4096, seed: int = 0):
        if capacity < 1:
            raise ValidationError("bank capacity must be >= 1")
        self.capacity = capacity
        self._vectors: List[np.ndarray] = []
        self._sources: List[str] = []
        self._seen = 0
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self._vectors)

    def add(self, embedding: np.ndarray, source_id: str) -> None:
        embedding = np.asarray(embedding, dtype=np.float64)
        if not np.all(np.isfinite(embedding)):
            raise ValidationError("bank embeddings must be finite")
        self._seen += 1
        if len(self._vectors) < self.capacity:
            self._vectors.append(embedding)
            self._sources.append(source_id)
        else:
            slot = int(self._rng.integers(0, self._seen))
            if slot < self.capacity:
                self._vectors[slot] = embedding
                self._sources[slot] = source_id

    @property
    def vectors(self) -> np.ndarray:
        if not self._vectors:
            return np.zeros((0, 0))
        return np.stack(self._vectors)

    @property
    def sources(self) -> List[str]:
        return list(self._sources)


def conf_score(class_logits: np.ndarray) -> float:
    """Maximum softmax probability of the class logits."""
    logits = np.asarray(class_logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValidationError("class logits must be finite")
    z = logits - logits.max()
    e = np.exp(z)
    return float(e.max() / e.sum())


def sim_score(candidate: np.ndarray, bank: WeedBank) -> float:
    """Max cosine similarity between the candidate and any bank vector."""
    if len(bank) == 0:
        raise EmptyBankError("weed bank is empty; populate it or disable similarity gating")
    candidate = np.asarray(candidate, dtype=np.float64)
    norm = np.linalg.norm(candidate)
    if not np.all(np.isfinite(candidate)) or norm == 0:
        raise ValidationError("candidate embedding must be finite and non-zero")
    vecs = bank.vectors
    sims = vecs @ candidate / (np.linalg.norm(vecs, axis=1) * norm + 1e-300)
    return float(sims.max())


def build_weed_bank(teacher_params, labeled: Sequence[ImageSample], det_cfg: DetectorConfig,
                    capacity: int = 4096, seed: int = 0) -> WeedBank:
    """Embeddings pooled at ground-truth weed boxes of the labeled set."""
    bank = WeedBank(capacity=capacity, seed=seed)
    for sample in labeled:
        raw = forward(normalize_image(sample.image), teacher_params, det_cfg)
        for k, (inst, emb) in enumerate(extract_gt_embeddings(sample, raw, det_cfg)):
            bank.add(emb, f"{sample.id}#{k}")
    return bank


@dataclass(frozen=True)
class PseudoLabel:
    prediction: Prediction            # in the original image frame
    conf_score: float
    sim_score: Optional[float]        # None for non-weed predictions
    image_id: str
    recipe_id: str


def _map_prediction_back(pred: Prediction, inv_map, width: int, height: int) -> Optional[Prediction]:
    corners = inv_map(np.array([[pred.bbox[0], pred.bbox[1]], [pred.bbox[2], pred.bbox[3]]]))
    x0, x1 = sorted((corners[0, 0], corners[1, 0]))
    y0, y1 = sorted((corners[0, 1], corners[1, 1]))
    x0, y0 = max(x0, 0.0), max(y0, 0.0)
    x1, y1 = min(x1, float(width)), min(y1, float(height))
    if x1 - x0 < 2.0 or y1 - y0 < 2.0:
        return None
    stem = None
    if pred.stem is not None:
        s = inv_map(np.asarray(pred.stem, dtype=np.float64))
        # keep the training target consistent with the box it belongs to
        stem = (float(np.clip(s[0], x0, x1)), float(np.clip(s[1], y0, y1)))
    return Prediction(pred.class_id, pred.confidence, (float(x0), float(y0), float(x1), float(y1)),
                      stem, pred.embedding, pred.class_probs)


def generate_pseudo_labels(teacher_params, unlabeled: Sequence[ImageSample], bank: WeedBank,
                           cfg: SSLConfig, det_cfg: DetectorConfig,
                           conf_decode_threshold: float = 0.15,
                           nms_iou: float = 0.45, seed: int = 0
                           ) -> List[Tuple[ImageSample, List[PseudoLabel]]]:
    """Teacher decodes augmented unlabeled images; predictions pass when
    conf >= tau and (weeds only) bank similarity >= xi. Retained labels are
    mapped back into each image's original frame."""
    rng = np.random.default_rng(seed)
    teacher_kind = "strong" if cfg.augmentation_routing == "paper" else "weak"
    results = []
    for idx, sample in enumerate(unlabeled):
        if sample.labeled:
            raise ValidationError(f"sample {sample.id} is labeled; pseudo-labeling expects unlabeled data")
        recipe = sample_recipe(teacher_kind, rng, sample.width, sample.height)
        recipe_id = f"{teacher_kind}-{seed}-{idx}"
        aug, inv_map = apply_augmentation(sample, recipe)
        raw = forward(normalize_image(aug.image), teacher_params, det_cfg)
        labels: List[PseudoLabel] = []
        for pred in decode(raw, det_cfg, conf_decode_threshold, nms_iou):
            conf = float(pred.class_probs.max())  # == conf_score of the cell's class logits
            if conf < cfg.tau:
                continue
            sim = None
            if pred.class_id == WEED_CLASS_ID:
                if len(bank) == 0:
                    if cfg.on_empty_bank == "error":
                        raise EmptyBankError("weed bank is empty during pseudo-label generation")
                else:
                    sim = sim_score(pred.embedding, bank)
                    if sim < cfg.xi:
                        continue
            mapped = _map_prediction_back(pred, inv_map, sample.width, sample.height)
            if mapped is None:
                continue
            labels.append(PseudoLabel(mapped, conf, sim, sample.id, recipe_id))
        results.append((sample, labels))
    return results


def pseudo_to_samples(results: Sequence[Tuple[ImageSample, Sequence[PseudoLabel]]]) -> List[ImageSample]:
    """Turn gated pseudo labels into trainable labeled samples (images that
    received no labels are skipped)."""
    out = []
    for sample, labels in results:
        if not labels:
            continue
        instances = []
        for pl in labels:
            p = pl.prediction
            stem = p.stem if p.class_id == WEED_CLASS_ID else None
            instances.append(LabeledInstance(p.class_id, p.bbox, stem))
        out.append(ImageSample(image=sample.image, id=f"{sample.id}::pseudo",
                               instances=instances, labeled=True))
    return out


def ema_update(teacher_params: Dict[str, np.ndarray], student_params: Dict[str, np.ndarray],
               m: float) -> Dict[str, np.ndarray]:
    """teacher <- m * teacher + (1 - m) * student, per parameter."""
    if not (0.0 <= m < 1.0):
        raise ValidationError("ema momentum must be in [0, 1)")
    if set(teacher_params) != set(student_params):
        raise ConfigError("teacher/student parameter sets differ")
    out = {}
    for k, tv in teacher_params.items():
        sv = student_params[k]
        if tv.shape != sv.shape:
            raise ConfigError(f"parameter {k} shape mismatch: {tv.shape} vs {sv.shape}")
        out[k] = m * tv + (1.0 - m) * sv
    return out


# ---------------------------------------------------------------------------
# pseudo-label cache (one JSONL record per retained label)
# ---------------------------------------------------------------------------

def save_pseudo_cache(path, results: Sequence[Tuple[ImageSample, Sequence[PseudoLabel]]]) -> None:
    with open(path, "w") as f:
        for sample, labels in results:
            for pl in labels:
                p = pl.prediction
                f.write(json.dumps({
                    "image_id": pl.image_id,
                    "class_id": p.class_id,
                    "bbox": list(p.bbox),
                    "stem": list(p.stem) if p.stem is not None else None,
                    "conf": pl.conf_score,
                    "sim": pl.sim_score,
                    "recipe_id": pl.recipe_id,
                }) + "\n")


def load_pseudo_cache(path) -> List[dict]:
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records
