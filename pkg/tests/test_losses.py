import math

import numpy as np
import pytest

from labeldenoise.errors import EmptyBatch, NonFinite
from labeldenoise.losses import (
    LossReport,
    LossWeights,
    bbox_recon_loss,
    class_ce,
    depth_recon_loss,
    laplacian_term,
    log_header,
    total_loss,
    total_recon,
)


def test_laplacian_examples():
    assert laplacian_term(1.0, 1.0, 0.0) == (0.0, 0.0, 1.0)
    v, _, _ = laplacian_term(0.0, 1.0, 0.0)
    assert v == pytest.approx(1.41421356, abs=1e-8)
    v, _, g = laplacian_term(0.0, 1.0, math.log(math.sqrt(2)))
    assert v == pytest.approx(1 + 0.5 * math.log(2), abs=1e-12)
    assert g == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(NonFinite):
        laplacian_term(float("nan"), 0.0, 0.0)


def test_laplacian_minimum_in_scale():
    r = 0.37
    star = math.log(math.sqrt(2) * r)
    f = lambda s: laplacian_term(0.0, r, s)[0]
    h = 1e-4
    assert laplacian_term(0.0, r, star)[2] == pytest.approx(0.0, abs=1e-12)
    assert f(star + h) + f(star - h) - 2 * f(star) > 0


def test_depth_loss_examples():
    assert depth_recon_loss([3.0], [3.0], [0.0])[0] == 0.0
    v, _ = depth_recon_loss([1.0, 2.0], [0.0, 1.0], [0.0, 0.0])
    assert v == pytest.approx(2 * math.sqrt(2), abs=1e-15)
    rng = np.random.default_rng(0)
    gt, pr, ls = rng.normal(size=(3, 40))
    oracle = sum(math.sqrt(2) * math.exp(-s) * abs(a - b) + s for a, b, s in zip(gt, pr, ls))
    assert depth_recon_loss(gt, pr, ls)[0] == pytest.approx(oracle, abs=1e-12)
    with pytest.raises(EmptyBatch):
        depth_recon_loss([], [], [])


def test_bbox_loss_examples():
    gt = np.array([[0.4, 0.3, 0.6, 0.7]])
    assert bbox_recon_loss(gt, gt, np.zeros((1, 4)))[0] == 0.0
    v, _ = bbox_recon_loss(gt, gt + 0.1, np.zeros((1, 4)))
    assert v == pytest.approx(0.565685, abs=1e-6)
    with pytest.raises(EmptyBatch):
        bbox_recon_loss(np.zeros((0, 4)), np.zeros((0, 4)), np.zeros((0, 4)))


def test_losses_permutation_invariant():
    rng = np.random.default_rng(3)
    gt, pr, ls = rng.normal(size=(3, 12, 4))
    perm = rng.permutation(12)
    assert bbox_recon_loss(gt, pr, ls)[0] == pytest.approx(bbox_recon_loss(gt[perm], pr[perm], ls[perm])[0], rel=1e-14)


def test_class_ce_examples():
    v, g = class_ce(np.zeros(4), 2)
    assert v == pytest.approx(math.log(4), abs=1e-15)
    assert g.sum() == pytest.approx(0.0, abs=1e-15)
    v, _ = class_ce(np.array([30.0, 0.0, 0.0, 0.0]), 0)
    assert v < 1e-12
    v, g = class_ce(np.random.default_rng(1).normal(size=(6, 4)), [0, 1, 2, 3, 3, 0])
    assert np.allclose(g.sum(axis=1), 0.0, atol=1e-15)
    with pytest.raises(NonFinite):
        class_ce(np.array([0.0, float("inf")]), 0)
    with pytest.raises(ValueError):
        class_ce(np.zeros(4), 4)


def test_total_recon_examples():
    assert total_recon((2, 3, 5)) == 10
    assert total_recon((2, 3, 5), LossWeights(0, 0, 0)) == 0
    assert total_recon((0.5656, 1.4142, 1.3863), LossWeights(2, 1, 0.5)) == pytest.approx(2 * 0.5656 + 1.4142 + 0.5 * 1.3863, abs=1e-12)
    assert total_recon((1, 2, 3), LossWeights(3, 3, 3)) == pytest.approx(3 * total_recon((1, 2, 3)))
    with pytest.raises(ValueError):
        LossWeights(-1, 1, 1)


def test_total_loss_and_report():
    assert total_loss(10, 5) == 15 and total_loss(2.5, 0) == 2.5
    rep = LossReport(0.3, 1.2, 0.9, 2.0, LossWeights(2, 1, 0.5), epoch=3, step=1)
    assert rep.total == pytest.approx(2 * 0.3 + 1.2 + 0.5 * 0.9 + 2.0, abs=1e-10)
    assert total_loss(total_recon((0.3, 1.2, 0.9), rep.weights), rep.det) == pytest.approx(rep.total, abs=1e-10)
    line = rep.csv_line().strip().split(",")
    assert len(line) == len(log_header().strip().split(",")) and line[:2] == ["3", "1"]


def _fd(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2 * h)


def test_gradients_against_finite_differences():
    rng = np.random.default_rng(7)
    n = 0
    while n < 200:
        pr, gt, ls = rng.normal(size=3)
        if abs(gt - pr) < 1e-4:
            continue
        _, gp, gs = laplacian_term(pr, gt, ls)
        assert gp == pytest.approx(_fd(lambda x: laplacian_term(x, gt, ls)[0], pr), rel=1e-5)
        assert gs == pytest.approx(_fd(lambda x: laplacian_term(pr, gt, x)[0], ls), rel=1e-5)
        n += 1
