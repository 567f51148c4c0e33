"""Loss algebra, invariances, and the finite-difference gradient checker."""
import numpy as np
import pytest

from weedstem.errors import NumericalError, ValidationError
from weedstem.losses import (LossWeights, bbox_loss, classification_loss,
                             combined_loss, gradient_check,
                             stem_regression_loss)
from weedstem.network import DetectorConfig
from weedstem.targets import assign_targets
from weedstem.types import LabeledInstance


@pytest.fixture
def cfg():
    return DetectorConfig(input_size=64, grid_size=8, anchors=((12.0, 12.0), (24.0, 24.0)),
                          num_classes=4, channels=(6, 12, 24))


@pytest.fixture
def target(cfg):
    return assign_targets([
        LabeledInstance(0, (10.0, 12.0, 22.0, 26.0), (14.0, 18.0)),
        LabeledInstance(1, (30.0, 30.0, 54.0, 52.0)),
    ], cfg)


def _grid(cfg, rng):
    return rng.normal(size=(cfg.grid_size, cfg.grid_size, cfg.num_anchors,
                            cfg.channels_per_anchor))


def test_weights_validation():
    with pytest.raises(ValidationError):
        LossWeights(-0.1, 0.3, 0.5)
    with pytest.raises(ValidationError):
        LossWeights(0.0, 0.0, 0.0)
    w = LossWeights()
    assert (w.alpha, w.beta, w.gamma) == (0.2, 0.3, 0.5)


def test_total_is_exact_weighted_sum(cfg, target, rng):
    grid = _grid(cfg, rng)
    w = LossWeights(0.2, 0.3, 0.5)
    bd = combined_loss(grid, target, w, cfg)
    expect = 0.2 * bd.l_cls + 0.3 * bd.l_bbox + 0.5 * bd.l_reg
    assert bd.total == expect  # exact float equality, same operations
    assert bd.n_pos == 2 and bd.n_weed == 1


def test_weed_only_regression_invariance(cfg, target, rng):
    """Stem outputs anywhere outside the weed mask must not touch l_reg."""
    grid = _grid(cfg, rng)
    base = stem_regression_loss(grid, target, cfg)
    c = cfg.num_classes
    perturbed = grid.copy()
    weed = target.weed_mask
    perturbed[..., 5 + c: 5 + c + 2] += 100.0 * (~weed[..., None])
    assert stem_regression_loss(perturbed, target, cfg) - base == 0.0


def test_regression_loss_value(cfg, rng):
    inst = LabeledInstance(0, (10.0, 12.0, 22.0, 26.0), (14.0, 18.0))
    target = assign_targets([inst], cfg)
    grid = np.zeros((8, 8, 2, cfg.channels_per_anchor))
    c = cfg.num_classes
    gy, gx, a = np.argwhere(target.weed_mask)[0]
    grid[gy, gx, a, 5 + c: 5 + c + 2] = target.stem_t[gy, gx, a] + [0.3, -0.4]
    assert np.isclose(stem_regression_loss(grid, target, cfg), 0.3**2 + 0.4**2)


def test_empty_targets_zero_loss(cfg, rng):
    target = assign_targets([], cfg)
    grid = _grid(cfg, rng)
    assert stem_regression_loss(grid, target, cfg) == 0.0
    assert bbox_loss(grid, target, cfg) == 0.0
    # objectness BCE still applies with no positives
    assert classification_loss(grid, target, cfg) > 0.0


def test_classification_loss_perfect_prediction(cfg, target):
    grid = np.zeros((8, 8, 2, cfg.channels_per_anchor))
    grid[..., 0] = -60.0
    for gy, gx, a in np.argwhere(target.pos_mask):
        grid[gy, gx, a, 0] = 60.0
        grid[gy, gx, a, 5 + target.class_idx[gy, gx, a]] = 60.0
    assert classification_loss(grid, target, cfg) < 1e-12


def test_analytic_gradient_matches_finite_difference(cfg, target, rng):
    grid = _grid(cfg, rng)
    w = LossWeights()
    _, d_grid = combined_loss(grid, target, w, cfg, want_grad=True)
    d_grid = d_grid[0]  # gradients come back batched
    eps = 1e-6
    for _ in range(40):
        idx = tuple(rng.integers(0, s) for s in grid.shape)
        gp, gm = grid.copy(), grid.copy()
        gp[idx] += eps
        gm[idx] -= eps
        num = (combined_loss(gp, target, w, cfg).total
               - combined_loss(gm, target, w, cfg).total) / (2 * eps)
        assert abs(num - d_grid[idx]) <= 1e-6 * max(1.0, abs(num))


def test_gradient_check_flags_corruption(cfg, target, toy_params):
    from weedstem.network import backward_batch, forward_batch
    imgs = np.random.default_rng(2).normal(size=(1, 64, 64, 3))
    from weedstem.targets import stack_targets
    stacked = stack_targets([target])
    w = LossWeights()

    def loss_fn(params):
        raw, cache = forward_batch(imgs, params, cfg, want_cache=True)
        bd, d_grid = combined_loss(raw, stacked, w, cfg, want_grad=True)
        return bd.total, backward_batch(d_grid, params, cfg, cache)

    def corrupted_fn(params):
        loss, grads = loss_fn(params)
        return loss, {k: 2.0 * g for k, g in grads.items()}

    good = gradient_check(loss_fn, toy_params, probe_count=20, epsilon=1e-5, seed=3)
    bad = gradient_check(corrupted_fn, toy_params, probe_count=20, epsilon=1e-5, seed=3)
    assert good < 1e-4
    assert bad > 0.5  # doubled gradients show ~100% relative error


def test_gradient_check_input_validation(toy_params):
    fn = lambda p: (0.0, {k: np.zeros_like(v) for k, v in p.items()})
    with pytest.raises(ValidationError):
        gradient_check(fn, toy_params, epsilon=1.0)
    with pytest.raises(ValidationError):
        gradient_check(fn, toy_params, probe_count=0)
    with pytest.raises(NumericalError):
        gradient_check(lambda p: (float("nan"), {}), toy_params)
