"""Augmentation geometry, inverse maps, and label transport."""
import numpy as np
import pytest

from weedstem.augment import AffineMap, apply_augmentation, sample_recipe
from weedstem.errors import ValidationError
from weedstem.types import AugmentationRecipe, ImageSample, LabeledInstance


def _sample(size=100):
    img = np.random.default_rng(1).integers(0, 255, size=(size, size, 3)).astype(np.uint8)
    inst = [LabeledInstance(0, (20, 30, 50, 70), (30, 40)),
            LabeledInstance(1, (60, 10, 90, 40))]
    return ImageSample(image=img, id="a", instances=inst)


def test_horizontal_flip_moves_stem():
    sample = _sample()
    recipe = AugmentationRecipe("strong", flip="horizontal")
    out, inv = apply_augmentation(sample, recipe)
    weed = next(i for i in out.instances if i.is_weed)
    # x mirrors around the image width, y is untouched
    assert weed.stem == (100 - 30, 40)
    assert weed.bbox == (100 - 50, 30, 100 - 20, 70)
    back = inv(np.array([weed.stem], dtype=np.float64))[0]
    assert np.allclose(back, (30, 40))


def test_inverse_map_identity_1000_points():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 100, size=(1000, 2))
    for kind in ("weak", "strong"):
        for trial in range(20):
            recipe = sample_recipe(kind, rng, 100, 100)
            sample = _sample()
            _, inv = apply_augmentation(sample, recipe)
            fwd = inv.invert()
            err = np.abs(inv(fwd(pts)) - pts).max()
            assert err < 0.5, f"{kind} trial {trial}: round-trip error {err}"


def test_photometric_identity_is_exact_copy():
    sample = _sample()
    out, _ = apply_augmentation(sample, AugmentationRecipe("weak"))
    assert np.array_equal(out.image, sample.image)
    assert out.image is not sample.image


def test_photometric_shift_changes_pixels():
    sample = _sample()
    out, _ = apply_augmentation(sample, AugmentationRecipe("weak", brightness_delta=0.1))
    assert not np.array_equal(out.image, sample.image)
    assert out.image.dtype == np.uint8


def test_crop_drops_outside_instances_and_cropped_stems():
    sample = _sample()
    # window excludes the crop instance entirely and the weed's stem point
    recipe = AugmentationRecipe("strong", crop_window=(35.0, 0.0, 95.0, 60.0))
    out, _ = apply_augmentation(sample, recipe)
    assert all(not i.is_weed for i in out.instances)  # weed stem (30,40) was cropped away
    recipe2 = AugmentationRecipe("strong", crop_window=(10.0, 20.0, 60.0, 80.0))
    out2, _ = apply_augmentation(sample, recipe2)
    weed = next(i for i in out2.instances if i.is_weed)
    x0, y0, x1, y1 = weed.bbox
    assert x0 <= weed.stem[0] <= x1 and y0 <= weed.stem[1] <= y1


def test_weak_recipe_rejects_geometry():
    with pytest.raises(ValidationError):
        AugmentationRecipe("weak", flip="horizontal")
    with pytest.raises(ValidationError):
        AugmentationRecipe("weak", crop_window=(0, 0, 10, 10))


def test_crop_window_bounds_validated():
    sample = _sample()
    with pytest.raises(ValidationError):
        apply_augmentation(sample, AugmentationRecipe("strong", crop_window=(0.0, 0.0, 120.0, 50.0)))


def test_sampled_recipes_respect_kind():
    rng = np.random.default_rng(5)
    for _ in range(50):
        weak = sample_recipe("weak", rng, 100, 100)
        assert weak.crop_window is None and weak.flip is None
        strong = sample_recipe("strong", rng, 100, 100)
        assert strong.crop_window is not None
        x0, y0, x1, y1 = strong.crop_window
        assert 0 <= x0 < x1 <= 100 and 0 <= y0 < y1 <= 100


def test_affine_map_invert_roundtrip():
    m = AffineMap(2.0, -1.5, 3.0, 7.0)
    pts = np.array([[1.0, 2.0], [-4.0, 9.0]])
    assert np.allclose(m.invert()(m(pts)), pts)
