"""Optimizers, the shared training core, splitting, and anchor priors."""
import numpy as np
import pytest

from weedstem.errors import ConfigError, DataError
from weedstem.losses import LossWeights
from weedstem.network import init_params
from weedstem.ssl import SSLConfig
from weedstem.train import (SGD, Adam, compute_anchors, make_optimizer,
                            split_dataset, train_loop, train_student,
                            train_supervised)
from weedstem.synthetic import generate_scene
from weedstem.types import SyntheticSceneSpec


def _scenes(n, base=300, size=64):
    return [generate_scene(SyntheticSceneSpec(seed=base + i, image_size=size,
                                              crop_count=1, weed_count=2))
            for i in range(n)]


def test_sgd_momentum_known_trajectory():
    params = {"w": np.array([1.0])}
    opt = SGD(lr=0.1, momentum=0.5)
    opt.step(params, {"w": np.array([1.0])})
    assert np.allclose(params["w"], 0.9)          # v = 1
    opt.step(params, {"w": np.array([1.0])})
    assert np.allclose(params["w"], 0.9 - 0.15)   # v = 1.5


def test_adam_first_step_is_lr_sized():
    params = {"w": np.array([0.0])}
    Adam(lr=0.01).step(params, {"w": np.array([123.0])})
    # bias-corrected first step is lr * sign(grad) up to eps
    assert np.allclose(params["w"], -0.01, atol=1e-6)


def test_make_optimizer_rejects_unknown():
    with pytest.raises(ConfigError):
        make_optimizer("lion", 1e-3)


def test_zero_pseudo_ratio_bit_matches_supervised(toy_config):
    scenes = _scenes(6)
    pseudo = _scenes(2, base=400)
    w = LossWeights()

    p1 = init_params(toy_config, seed=1)
    p1, hist1 = train_supervised(scenes, p1, toy_config, w, make_optimizer("adam", 1e-3),
                                 steps=5, batch_size=4, rng=np.random.default_rng(7))
    p2 = init_params(toy_config, seed=1)
    p2, _, hist2 = train_loop(scenes, pseudo, p2, toy_config, w, make_optimizer("adam", 1e-3),
                              steps=5, batch_size=4, rng=np.random.default_rng(7),
                              unlabeled_batch_ratio=0.0)
    for k in p1:
        assert np.array_equal(p1[k], p2[k]), k
    assert [b.total for b in hist1] == [b.total for b in hist2]


def test_train_loop_validation(toy_config, toy_params):
    w = LossWeights()
    with pytest.raises(DataError):
        train_loop([], [], toy_params, toy_config, w, make_optimizer("sgd", 1e-3),
                   steps=1, batch_size=2, rng=np.random.default_rng(0))
    with pytest.raises(ConfigError):
        # wrong image size for the detector
        train_loop(_scenes(2, size=96), [], toy_params, toy_config, w,
                   make_optimizer("sgd", 1e-3), steps=1, batch_size=2,
                   rng=np.random.default_rng(0))


def test_train_student_updates_teacher_by_ema(toy_config):
    scenes = _scenes(4)
    pseudo = _scenes(2, base=500)
    student = init_params(toy_config, seed=2)
    teacher = {k: v.copy() for k, v in student.items()}
    before = {k: v.copy() for k, v in teacher.items()}
    cfg = SSLConfig(ema_momentum=0.9)
    student, teacher, hist = train_student(
        scenes, pseudo, student, teacher, cfg, LossWeights(), steps=3,
        det_cfg=toy_config, optimizer=make_optimizer("adam", 1e-3), batch_size=2,
        rng=np.random.default_rng(3))
    assert len(hist) == 3
    moved = any(not np.array_equal(before[k], teacher[k]) for k in teacher)
    assert moved
    # teacher lags the student: it stays between the init and the student
    gap_ts = sum(np.abs(teacher[k] - student[k]).sum() for k in teacher)
    gap_is = sum(np.abs(before[k] - student[k]).sum() for k in teacher)
    assert gap_ts < gap_is


def test_split_dataset_partitions_and_seeds():
    scenes = _scenes(10)
    tr, va, te = split_dataset(scenes, (0.6, 0.2, 0.2), seed=4)
    assert len(tr) == 6 and len(va) == 2 and len(te) == 2
    ids = {s.id for s in tr} | {s.id for s in va} | {s.id for s in te}
    assert ids == {s.id for s in scenes}
    tr2, _, _ = split_dataset(scenes, (0.6, 0.2, 0.2), seed=4)
    assert [s.id for s in tr] == [s.id for s in tr2]
    with pytest.raises(ConfigError):
        split_dataset(scenes, (0.6, 0.2, 0.3), seed=0)


def test_compute_anchors_recovers_two_box_scales():
    scenes = _scenes(12)
    anchors = compute_anchors(scenes, k=2, seed=0)
    assert len(anchors) == 2
    (w1, h1), (w2, h2) = anchors
    assert w1 * h1 <= w2 * h2  # sorted by area
    assert all(5 < v < 60 for v in (w1, h1, w2, h2))
    with pytest.raises(DataError):
        compute_anchors(_scenes(0), k=2)
