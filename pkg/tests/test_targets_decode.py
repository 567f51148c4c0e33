"""Target assignment and the decode path, checked against each other via an
encode -> decode round trip."""
import logging

import numpy as np
import pytest

from weedstem.decode import Prediction, decode, nms
from weedstem.network import DetectorConfig, RawGridOutput
from weedstem.targets import (assign_targets, encode_to_raw, stack_targets,
                              stem_cell_targets)
from weedstem.types import LabeledInstance


@pytest.fixture
def cfg():
    return DetectorConfig(input_size=64, grid_size=8, anchors=((12.0, 12.0), (24.0, 24.0)),
                          num_classes=4, channels=(6, 12, 24))


def _raw(cfg, grid):
    feats = np.zeros((cfg.grid_size, cfg.grid_size, cfg.embedding_dim))
    return RawGridOutput(grid=grid, features=feats)


def test_assignment_values(cfg):
    inst = LabeledInstance(0, (10.0, 12.0, 22.0, 26.0), (14.0, 18.0))
    tgt = assign_targets([inst], cfg)
    # center (16, 19) -> cell (2, 2); 12x14 box prefers the 12x12 anchor
    assert tgt.pos_mask[2, 2, 0]
    assert tgt.weed_mask[2, 2, 0]
    assert tgt.pos_mask.sum() == 1
    np.testing.assert_allclose(tgt.box_t[2, 2, 0],
                               [16 / 8 - 2, 19 / 8 - 2, np.log(12 / 12), np.log(14 / 12)])
    np.testing.assert_allclose(tgt.stem_t[2, 2, 0], [14 / 8 - 2, 18 / 8 - 2])


def test_collision_keeps_larger_instance(cfg, caplog):
    a = LabeledInstance(1, (10.0, 10.0, 22.0, 22.0))
    b = LabeledInstance(2, (9.0, 9.0, 23.0, 23.0))  # same cell/anchor, larger
    logging.getLogger("weedstem.targets").setLevel(logging.WARNING)
    with caplog.at_level(logging.WARNING, logger="weedstem.targets"):
        tgt = assign_targets([a, b], cfg)
    assert tgt.pos_mask.sum() == 1
    gy, gx, an = np.argwhere(tgt.pos_mask)[0]
    assert tgt.class_idx[gy, gx, an] == 2
    assert any("collision" in r.message for r in caplog.records)


def test_encode_decode_roundtrip(cfg):
    instances = [
        LabeledInstance(0, (10.0, 12.0, 22.0, 26.0), (14.0, 18.0)),
        LabeledInstance(1, (30.0, 30.0, 54.0, 52.0)),
        LabeledInstance(0, (40.0, 6.0, 52.0, 18.0), (43.0, 16.0)),
    ]
    tgt = assign_targets(instances, cfg)
    raw = _raw(cfg, encode_to_raw(tgt, cfg))
    preds = decode(raw, cfg, conf_threshold=0.5)
    assert len(preds) == len(instances)
    by_class_x = sorted([(p.class_id, round(p.bbox[0])) for p in preds])
    want = sorted([(i.class_id, round(i.bbox[0])) for i in instances])
    assert by_class_x == want
    for inst in instances:
        best = min(preds, key=lambda p: abs(p.bbox[0] - inst.bbox[0]) + abs(p.bbox[1] - inst.bbox[1]))
        np.testing.assert_allclose(best.bbox, inst.bbox, atol=1e-6)
        if inst.is_weed:
            np.testing.assert_allclose(best.stem, inst.stem, atol=1e-6)
        else:
            assert best.stem is None


def test_stem_offsets_may_leave_the_cell(cfg):
    # stem two cells away from the box-center cell still survives the round trip
    inst = LabeledInstance(0, (8.0, 8.0, 40.0, 40.0), (9.0, 39.0))
    tgt = assign_targets([inst], cfg)
    raw = _raw(cfg, encode_to_raw(tgt, cfg))
    (pred,) = decode(raw, cfg, conf_threshold=0.5)
    np.testing.assert_allclose(pred.stem, inst.stem, atol=1e-6)


def test_stem_cell_targets_ignores_crops_and_boxes(cfg):
    instances = [LabeledInstance(0, (10.0, 12.0, 22.0, 26.0), (14.0, 18.0)),
                 LabeledInstance(1, (30.0, 30.0, 54.0, 52.0))]
    tgt = stem_cell_targets(instances, cfg)
    assert tgt.pos_mask.sum() == 0
    assert tgt.weed_mask.sum() == 1
    # supervised at the cell containing the stem, anchor 0
    assert tgt.weed_mask[18 // 8, 14 // 8, 0]
    np.testing.assert_allclose(tgt.stem_t[2, 1, 0], [14 / 8 - 1, 18 / 8 - 2])


def test_stack_targets_shapes(cfg):
    t1 = assign_targets([LabeledInstance(1, (10.0, 10.0, 22.0, 22.0))], cfg)
    t2 = assign_targets([], cfg)
    stacked = stack_targets([t1, t2])
    assert stacked.pos_mask.shape == (2, 8, 8, 2)
    assert stacked.pos_mask[0].sum() == 1 and stacked.pos_mask[1].sum() == 0


def test_nms_suppresses_overlaps():
    boxes = np.array([[0, 0, 10, 10], [1, 1, 11, 11], [20, 20, 30, 30]], dtype=np.float64)
    scores = np.array([0.9, 0.8, 0.7])
    assert nms(boxes, scores, 0.45) == [0, 2]
    assert nms(boxes, scores, 0.99) == [0, 1, 2]


def test_decode_threshold_keeps_subsets(cfg, rng):
    grid = rng.normal(size=(8, 8, 2, cfg.channels_per_anchor))
    raw = _raw(cfg, grid)
    low = decode(raw, cfg, conf_threshold=0.05)
    high = decode(raw, cfg, conf_threshold=0.3)
    key = lambda p: (p.class_id, p.bbox)
    assert {key(p) for p in high} <= {key(p) for p in low}


def test_decoded_embeddings_are_pooled_features(cfg):
    inst = LabeledInstance(1, (17.0, 17.0, 31.0, 31.0))
    tgt = assign_targets([inst], cfg)
    feats = np.arange(8 * 8 * cfg.embedding_dim, dtype=np.float64).reshape(8, 8, -1)
    raw = RawGridOutput(grid=encode_to_raw(tgt, cfg), features=feats)
    (pred,) = decode(raw, cfg, conf_threshold=0.5)
    gx0, gx1 = 2, 3  # cells overlapped by [17, 31]
    expect = feats[gx0:gx1 + 1, gx0:gx1 + 1].reshape(-1, cfg.embedding_dim).mean(axis=0)
    np.testing.assert_allclose(pred.embedding, expect)
