"""Deterministic synthetic field scenes with known boxes and stem points.

Weeds are drawn as asymmetric sprites: foliage mass sits at the bbox center
while a small dark stem base marks the true aim point, which is displaced
from the center. A detector can therefore beat the bbox-center baseline by
learning to find the stem marker.
"""
from __future__ import annotations

import numpy as np

from .errors import CapacityError
from .types import ImageSample, LabeledInstance, SyntheticSceneSpec, WEED_CLASS_ID, NAME_TO_ID

_PLACEMENT_RETRIES = 200

# foliage colors per class (RGB)
_CROP_COLORS = {
    NAME_TO_ID["maize"]: (66, 148, 54),
    NAME_TO_ID["soybean"]: (92, 170, 82),
    NAME_TO_ID["mungbean"]: (120, 186, 96),
}
_WEED_COLOR = (150, 196, 60)
_STEM_COLOR = (70, 40, 24)


def _soil_background(rng: np.random.Generator, size: int, clutter: float) -> np.ndarray:
    img = np.empty((size, size, 3), dtype=np.float64)
    base = np.array([120.0, 96.0, 70.0])
    noise = rng.normal(0.0, 6.0 + 18.0 * clutter, size=(size, size, 1))
    img[:] = base[None, None, :] + noise
    # sparse pebbles / debris blobs
    n_blobs = int(clutter * size * size / 600)
    ys, xs = np.mgrid[0:size, 0:size]
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0, size, size=2)
        r = rng.uniform(1.5, 4.0)
        shade = rng.uniform(-30, 30)
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 < r * r
        img[mask] += shade
    return img


def _draw_ellipse(img, cx, cy, rx, ry, color, soft=0.35):
    size = img.shape[0]
    x0 = max(int(cx - rx - 2), 0)
    x1 = min(int(cx + rx + 3), size)
    y0 = max(int(cy - ry - 2), 0)
    y1 = min(int(cy + ry + 3), size)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    d = ((xs + 0.5 - cx) / max(rx, 1e-6)) ** 2 + ((ys + 0.5 - cy) / max(ry, 1e-6)) ** 2
    w = np.clip((1.0 - d) / soft, 0.0, 1.0)
    color = np.asarray(color, dtype=np.float64)
    patch = img[y0:y1, x0:x1]
    patch[:] = patch * (1.0 - w[..., None]) + color[None, None, :] * w[..., None]


def _draw_crop(img, rng, inst: LabeledInstance):
    cx, cy = inst.center
    w, h = inst.width, inst.height
    color = np.asarray(_CROP_COLORS[inst.class_id], dtype=np.float64)
    # symmetric rosette: petals evenly spread around the center
    n_petals = 6
    phase = rng.uniform(0, 2 * np.pi)
    for k in range(n_petals):
        ang = phase + 2 * np.pi * k / n_petals
        px = cx + 0.28 * w * np.cos(ang)
        py = cy + 0.28 * h * np.sin(ang)
        _draw_ellipse(img, px, py, 0.20 * w, 0.20 * h, color + rng.uniform(-10, 10))
    _draw_ellipse(img, cx, cy, 0.18 * w, 0.18 * h, color * 0.85)


def _draw_weed(img, rng, inst: LabeledInstance):
    cx, cy = inst.center
    w, h = inst.width, inst.height
    sx, sy = inst.stem
    color = np.asarray(_WEED_COLOR, dtype=np.float64)
    # ragged foliage centered on the bbox, not the stem
    n_blades = 7
    for _ in range(n_blades):
        ang = rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(0.10, 0.38)
        px = cx + rad * w * np.cos(ang)
        py = cy + rad * h * np.sin(ang)
        _draw_ellipse(img, px, py, rng.uniform(0.10, 0.22) * w, rng.uniform(0.10, 0.22) * h,
                      color + rng.uniform(-18, 18))
    # stem base marker: dark disc at the true aim point, drawn on top of the
    # foliage so the aim cue survives small image scales
    r = max(0.13 * min(w, h), 2.5)
    _draw_ellipse(img, sx, sy, r, r, _STEM_COLOR, soft=0.6)


def generate_scene(spec: SyntheticSceneSpec) -> ImageSample:
    """Render one labeled scene; bit-identical for identical specs."""
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    img = _soil_background(rng, size, spec.clutter_level)

    scale = size / 256.0
    instances = []
    centers = []
    total = spec.crop_count + spec.weed_count
    for i in range(total):
        is_weed = i >= spec.crop_count
        placed = False
        for _ in range(_PLACEMENT_RETRIES):
            if is_weed:
                w = rng.uniform(22, 44) * scale
                h = w * rng.uniform(0.85, 1.18)
            else:
                w = rng.uniform(28, 48) * scale
                h = w * rng.uniform(0.85, 1.18)
            w, h = max(w, 12.0), max(h, 12.0)
            cx = rng.uniform(w / 2 + 1, size - w / 2 - 1)
            cy = rng.uniform(h / 2 + 1, size - h / 2 - 1)
            min_sep = 0.8 * max(w, h)
            if all((cx - ox) ** 2 + (cy - oy) ** 2 > min_sep**2 for ox, oy in centers):
                placed = True
                break
        if not placed:
            raise CapacityError(
                f"could not place instance {i + 1}/{total} in {size}px scene after "
                f"{_PLACEMENT_RETRIES} retries"
            )
        centers.append((cx, cy))
        x0 = int(round(cx - w / 2))
        y0 = int(round(cy - h / 2))
        x1 = int(round(cx + w / 2))
        y1 = int(round(cy + h / 2))
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, size), min(y1, size)
        if is_weed:
            # stem displaced from the bbox center; distance in fractions of
            # the min bbox dimension, clipped so it stays inside the box
            frac = abs(rng.normal(spec.stem_offset_mean, spec.stem_offset_spread))
            frac = min(frac, 0.45)
            ang = rng.uniform(0, 2 * np.pi)
            bcx, bcy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
            d = frac * min(x1 - x0, y1 - y0)
            stem_x = int(round(bcx + d * np.cos(ang)))
            stem_y = int(round(bcy + d * np.sin(ang)))
            stem_x = min(max(stem_x, x0), x1)
            stem_y = min(max(stem_y, y0), y1)
            inst = LabeledInstance(WEED_CLASS_ID, (x0, y0, x1, y1), (stem_x, stem_y))
        else:
            crop_class = 1 + rng.integers(0, 1)  # maize only by default
            inst = LabeledInstance(int(crop_class), (x0, y0, x1, y1))
        instances.append(inst)

    for inst in instances:
        if inst.is_weed:
            _draw_weed(img, rng, inst)
        else:
            _draw_crop(img, rng, inst)

    sample = ImageSample(
        image=np.clip(img, 0, 255).astype(np.uint8),
        id=f"synth_{spec.seed:08d}",
        instances=instances,
        labeled=True,
    )
    sample.validate()
    return sample


def generate_dataset(base_seed: int, count: int, **spec_kwargs) -> list:
    """Scenes with seeds base_seed..base_seed+count-1."""
    return [generate_scene(SyntheticSceneSpec(seed=base_seed + i, **spec_kwargs)) for i in range(count)]
