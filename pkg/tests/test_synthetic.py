"""Synthetic scene generator: determinism, label validity, offset statistics."""
import numpy as np
import pytest

from weedstem.errors import CapacityError
from weedstem.synthetic import generate_dataset, generate_scene
from weedstem.types import SyntheticSceneSpec, samples_equal


def test_determinism_bit_exact():
    spec = SyntheticSceneSpec(seed=42, image_size=96, crop_count=2, weed_count=3)
    a = generate_scene(spec)
    b = generate_scene(spec)
    assert samples_equal(a, b)
    assert np.array_equal(a.image, b.image)


def test_different_seeds_differ():
    a = generate_scene(SyntheticSceneSpec(seed=1, image_size=96))
    b = generate_scene(SyntheticSceneSpec(seed=2, image_size=96))
    assert not np.array_equal(a.image, b.image)


def test_labels_valid_and_counted():
    s = generate_scene(SyntheticSceneSpec(seed=5, image_size=128, crop_count=3, weed_count=4))
    s.validate()
    weeds = [i for i in s.instances if i.is_weed]
    crops = [i for i in s.instances if not i.is_weed]
    assert len(weeds) == 4 and len(crops) == 3
    for w in weeds:
        assert w.stem is not None
        x0, y0, x1, y1 = w.bbox
        assert x0 <= w.stem[0] <= x1 and y0 <= w.stem[1] <= y1


def test_stem_offset_statistics_monte_carlo():
    """Mean stem displacement should track the configured fraction of the
    minimum bbox dimension (0.2 by default) within 5%."""
    fracs = []
    for seed in range(400):
        s = generate_scene(SyntheticSceneSpec(seed=10_000 + seed, image_size=128,
                                              crop_count=0, weed_count=2))
        for inst in s.instances:
            cx, cy = inst.center
            d = np.hypot(inst.stem[0] - cx, inst.stem[1] - cy)
            fracs.append(d / min(inst.width, inst.height))
    mean = float(np.mean(fracs))
    assert abs(mean - 0.2) / 0.2 < 0.05, f"mean offset fraction {mean:.4f}"


def test_overfull_scene_raises_capacity_error():
    with pytest.raises(CapacityError):
        generate_scene(SyntheticSceneSpec(seed=0, image_size=64, crop_count=30, weed_count=30))


def test_generate_dataset_seeds_are_consecutive():
    ds = generate_dataset(100, 3, image_size=64, crop_count=1, weed_count=1)
    assert [s.id for s in ds] == ["synth_00000100", "synth_00000101", "synth_00000102"]
