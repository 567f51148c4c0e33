"""Core scene/annotation domain types."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import ValidationError

CLASS_NAMES: Tuple[str, ...] = ("weed", "maize", "soybean", "mungbean")
WEED_CLASS_ID = 0
NAME_TO_ID = {name: i for i, name in enumerate(CLASS_NAMES)}


@dataclass(frozen=True)
class LabeledInstance:
    """One plant: class, pixel bounding box, and (for weeds) a stem point."""

    class_id: int
    bbox: Tuple[float, float, float, float]  # x_min, y_min, x_max, y_max
    stem: Optional[Tuple[float, float]] = None

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]

    @property
    def is_weed(self) -> bool:
        return self.class_id == WEED_CLASS_ID

    @property
    def center(self) -> Tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return (0.5 * (x0 + x1), 0.5 * (y0 + y1))

    @property
    def width(self) -> float:
        return self.bbox[2] - self.bbox[0]

    @property
    def height(self) -> float:
        return self.bbox[3] - self.bbox[1]

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def validate(self, image_w: int, image_h: int) -> None:
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValidationError(f"degenerate bbox {self.bbox}")
        if x0 < 0 or y0 < 0 or x1 > image_w or y1 > image_h:
            raise ValidationError(f"bbox {self.bbox} outside {image_w}x{image_h} image")
        if self.is_weed:
            if self.stem is None:
                raise ValidationError("weed instance missing stem point")
            sx, sy = self.stem
            if not (x0 <= sx <= x1 and y0 <= sy <= y1):
                raise ValidationError(f"stem {self.stem} outside bbox {self.bbox}")
        elif self.stem is not None:
            raise ValidationError(f"non-weed class {self.class_name} carries a stem point")


@dataclass
class ImageSample:
    """An image, its annotations, and its labeled/unlabeled flag."""

    image: np.ndarray  # H x W x 3 uint8
    id: str
    instances: list = field(default_factory=list)
    labeled: bool = True

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    def validate(self) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError(f"image must be HxWx3, got {self.image.shape}")
        if not self.labeled and self.instances:
            raise ValidationError("unlabeled sample carries instances")
        for inst in self.instances:
            inst.validate(self.width, self.height)

    def copy_with(self, **kwargs) -> "ImageSample":
        out = ImageSample(image=self.image, id=self.id, instances=list(self.instances), labeled=self.labeled)
        for k, v in kwargs.items():
            setattr(out, k, v)
        return out


def samples_equal(a: ImageSample, b: ImageSample) -> bool:
    """Bit-exact equality on image, id, flag, and all instance coordinates."""
    if a.id != b.id or a.labeled != b.labeled:
        return False
    if a.image.shape != b.image.shape or not np.array_equal(a.image, b.image):
        return False
    if len(a.instances) != len(b.instances):
        return False
    for ia, ib in zip(a.instances, b.instances):
        if ia.class_id != ib.class_id or tuple(ia.bbox) != tuple(ib.bbox):
            return False
        if (ia.stem is None) != (ib.stem is None):
            return False
        if ia.stem is not None and tuple(ia.stem) != tuple(ib.stem):
            return False
    return True


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Deterministic recipe for one synthetic field scene."""

    seed: int
    image_size: int = 256
    crop_count: int = 3
    weed_count: int = 3
    stem_offset_mean: float = 0.2   # fraction of min bbox dimension
    stem_offset_spread: float = 0.05
    clutter_level: float = 0.3

    def __post_init__(self):
        if self.image_size < 64:
            raise ValidationError("image_size must be >= 64")
        if self.crop_count < 0 or self.weed_count < 0:
            raise ValidationError("instance counts must be >= 0")
        if not (0.0 <= self.clutter_level <= 1.0):
            raise ValidationError("clutter_level must be in [0, 1]")


@dataclass(frozen=True)
class AugmentationRecipe:
    """Photometric (weak) or photometric + geometric (strong) perturbation."""

    kind: str  # "weak" | "strong"
    brightness_delta: float = 0.0
    contrast_factor: float = 1.0
    crop_window: Optional[Tuple[float, float, float, float]] = None
    flip: Optional[str] = None  # "horizontal" | "vertical"

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise ValidationError(f"unknown recipe kind {self.kind!r}")
        if self.kind == "weak" and (self.crop_window is not None or self.flip is not None):
            raise ValidationError("weak recipes cannot crop or flip")
        if self.flip not in (None, "horizontal", "vertical"):
            raise ValidationError(f"unknown flip {self.flip!r}")
