"""Weak/strong augmentation applied identically to pixels and labels.

Geometry is a single affine map (crop+resize then flip); label points go
through the same map, and the returned inverse maps augmented-space points
back to original pixel coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ValidationError
from .types import AugmentationRecipe, ImageSample, LabeledInstance

WEAK_BRIGHTNESS_RANGE = (-0.2, 0.2)
WEAK_CONTRAST_RANGE = (0.8, 1.25)
STRONG_CROP_AREA_RANGE = (0.6, 0.9)
STRONG_FLIP_PROB = 0.5


@dataclass(frozen=True)
class AffineMap:
    """x' = sx * x + tx (per axis), composed with an optional flip."""

    sx: float
    sy: float
    tx: float
    ty: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        out = np.empty_like(points)
        out[..., 0] = self.sx * points[..., 0] + self.tx
        out[..., 1] = self.sy * points[..., 1] + self.ty
        return out

    def invert(self) -> "AffineMap":
        return AffineMap(1.0 / self.sx, 1.0 / self.sy, -self.tx / self.sx, -self.ty / self.sy)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self.apply(points)


def _geometry(recipe: AugmentationRecipe, width: int, height: int) -> AffineMap:
    sx = sy = 1.0
    tx = ty = 0.0
    if recipe.crop_window is not None:
        x0, y0, x1, y1 = recipe.crop_window
        if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
            raise ValidationError(f"crop_window {recipe.crop_window} exceeds {width}x{height} image")
        sx, sy = width / (x1 - x0), height / (y1 - y0)
        tx, ty = -x0 * sx, -y0 * sy
    if recipe.flip == "horizontal":
        sx, tx = -sx, width - tx
    elif recipe.flip == "vertical":
        sy, ty = -sy, height - ty
    return AffineMap(sx, sy, tx, ty)


def _photometric(image: np.ndarray, recipe: AugmentationRecipe) -> np.ndarray:
    if recipe.brightness_delta == 0.0 and recipe.contrast_factor == 1.0:
        return image.copy()
    out = (image.astype(np.float64) - 128.0) * recipe.contrast_factor + 128.0
    out += 255.0 * recipe.brightness_delta
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _transform_instance(inst: LabeledInstance, fwd: AffineMap, width: int, height: int,
                        crop_window) -> LabeledInstance | None:
    x0, y0, x1, y1 = inst.bbox
    if crop_window is not None:
        cx0, cy0, cx1, cy1 = crop_window
        if x1 <= cx0 or x0 >= cx1 or y1 <= cy0 or y0 >= cy1:
            return None  # fully outside the crop
        if inst.stem is not None:
            sx, sy = inst.stem
            if not (cx0 <= sx <= cx1 and cy0 <= sy <= cy1):
                return None  # weed whose aim point was cropped away
    corners = fwd.apply(np.array([[x0, y0], [x1, y1]], dtype=np.float64))
    nx0, nx1 = sorted((corners[0, 0], corners[1, 0]))
    ny0, ny1 = sorted((corners[0, 1], corners[1, 1]))
    nx0, ny0 = max(nx0, 0.0), max(ny0, 0.0)
    nx1, ny1 = min(nx1, float(width)), min(ny1, float(height))
    if nx1 - nx0 < 1.0 or ny1 - ny0 < 1.0:
        return None
    stem = None
    if inst.stem is not None:
        s = fwd.apply(np.asarray(inst.stem, dtype=np.float64))
        stem = (float(np.clip(s[0], nx0, nx1)), float(np.clip(s[1], ny0, ny1)))
    return LabeledInstance(inst.class_id, (float(nx0), float(ny0), float(nx1), float(ny1)), stem)


def apply_augmentation(sample: ImageSample, recipe: AugmentationRecipe):
    """Returns (augmented sample, inverse map to original pixel coordinates)."""
    h, w = sample.image.shape[:2]
    fwd = _geometry(recipe, w, h)

    image = sample.image
    if recipe.crop_window is not None:
        x0, y0, x1, y1 = recipe.crop_window
        _geometry(recipe, w, h)  # validates bounds
        region = image[int(round(y0)) : int(round(y1)), int(round(x0)) : int(round(x1))]
        image = np.asarray(Image.fromarray(region).resize((w, h), Image.BILINEAR))
    if recipe.flip == "horizontal":
        image = image[:, ::-1]
    elif recipe.flip == "vertical":
        image = image[::-1, :]
    image = _photometric(np.ascontiguousarray(image), recipe)

    instances = []
    for inst in sample.instances:
        moved = _transform_instance(inst, fwd, w, h, recipe.crop_window)
        if moved is not None:
            instances.append(moved)

    out = ImageSample(image=image, id=sample.id, instances=instances, labeled=sample.labeled)
    return out, fwd.invert()


def sample_recipe(kind: str, rng: np.random.Generator, width: int, height: int) -> AugmentationRecipe:
    """Draw a random recipe of the given kind."""
    brightness = float(rng.uniform(*WEAK_BRIGHTNESS_RANGE))
    contrast = float(rng.uniform(*WEAK_CONTRAST_RANGE))
    if kind == "weak":
        return AugmentationRecipe("weak", brightness, contrast)
    area = float(rng.uniform(*STRONG_CROP_AREA_RANGE))
    frac = float(np.sqrt(area))
    cw, ch = frac * width, frac * height
    x0 = float(rng.uniform(0, width - cw))
    y0 = float(rng.uniform(0, height - ch))
    flip = "horizontal" if rng.random() < STRONG_FLIP_PROB else None
    return AugmentationRecipe("strong", brightness, contrast, (x0, y0, x0 + cw, y0 + ch), flip)
