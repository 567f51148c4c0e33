import logging

import numpy as np
import pytest

from weedstem.network import DetectorConfig, init_params
from weedstem.synthetic import generate_scene
from weedstem.types import SyntheticSceneSpec


@pytest.fixture(autouse=True)
def _quiet_collision_warnings():
    """Heavy augmentation makes target collisions routine; keep logs readable."""
    logger = logging.getLogger("weedstem.targets")
    old = logger.level
    logger.setLevel(logging.ERROR)
    yield
    logger.setLevel(old)


@pytest.fixture
def toy_config():
    return DetectorConfig(input_size=64, grid_size=8, anchors=((12.0, 12.0), (20.0, 20.0)),
                          num_classes=4, channels=(6, 12, 24))


@pytest.fixture
def toy_params(toy_config):
    return init_params(toy_config, seed=0)


@pytest.fixture
def toy_scene():
    return generate_scene(SyntheticSceneSpec(seed=7, image_size=64, crop_count=1, weed_count=2))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
