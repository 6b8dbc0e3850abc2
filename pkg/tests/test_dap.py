import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from labeldenoise.dap import (
    CleanLabel,
    DapConfig,
    DepthMode,
    clean_label_from_object,
    depth_label,
    flip_class,
    make_perturbed_label,
    perturb_bbox,
    perturb_depth,
)
from labeldenoise.errors import SingleClass
from labeldenoise.geometry import CameraCalib, ProjectedBox, reparameterize
from labeldenoise.kitti_io import parse_label_line
from labeldenoise.rng import make_rng
from labeldenoise.uncertainty import DifficultyScores

BOX = ProjectedBox(0.5, 0.5, 0.1, 0.2, 0.1, 0.2)


def _scores(box=1.0, d=1.0):
    return DifficultyScores({"d": d, "l": box, "t": box, "r": box, "b": box})


def test_zero_scores_identity():
    out = perturb_bbox(BOX, _scores(0.0), 0.4, make_rng(1))
    assert out.as_tuple() == BOX.as_tuple()


def test_worked_perturbation():
    out = perturb_bbox(BOX, _scores(1.0), 0.4, signs=(1, 1, -1, -1))
    assert reparameterize(out).as_tuple() == pytest.approx((0.44, 0.38, 0.56, 0.62), abs=1e-15)


def test_lower_edge_with_and_without_clip():
    # x_l = 0.05 with o_l = 0.10, pushed left by 0.04
    b = ProjectedBox(0.15, 0.5, 0.10, 0.1, 0.10, 0.1)
    out = reparameterize(perturb_bbox(b, _scores(1.0), 0.4, signs=(-1, 1, 1, 1)))
    assert out.x_l == pytest.approx(0.01, abs=1e-15)
    b = ProjectedBox(0.12, 0.5, 0.10, 0.1, 0.10, 0.1)
    out = reparameterize(perturb_bbox(b, _scores(1.0), 0.4, signs=(-1, 1, 1, 1)))
    assert out.x_l == 0.0


def test_depth_examples():
    assert perturb_depth(10.0, 0.5, 0.8, sign=1) == pytest.approx(14.0, rel=1e-15)
    assert perturb_depth(10.0, 0.0, 0.8, make_rng(0)) == 10.0
    assert perturb_depth(0.0, 1.0, 0.8, make_rng(0)) == 0.0


@given(st.floats(-50, 50), st.floats(0, 1), st.floats(0.01, 0.99), st.integers(0, 2**32))
def test_depth_relative_bound(d, c, g, seed):
    out = perturb_depth(d, c, g, make_rng(seed))
    assert abs(out - d) <= g * abs(d) * (1 + 1e-15)


def test_flip_examples():
    rng = make_rng(3)
    assert all(flip_class(1, 3, 0.0, rng) == 1 for _ in range(200))
    assert all(flip_class(0, 2, 1.0, rng) == 1 for _ in range(200))
    with pytest.raises(SingleClass):
        flip_class(0, 1, 0.5, rng)


def test_flip_uniform_over_others():
    rng = make_rng(11)
    draws = np.array([flip_class(0, 3, 1.0, rng) for _ in range(30000)])
    assert not np.any(draws == 0)
    counts = [np.sum(draws == 1), np.sum(draws == 2)]
    assert chisquare(counts).pvalue > 0.01


def test_config_validation():
    for bad in ({"gamma_b": 1.0}, {"gamma_b": 0.0}, {"gamma_d": 1.2}, {"class_flip_prob": -0.1}):
        with pytest.raises(ValueError):
            DapConfig(**bad)
    assert DapConfig(depth_mode="absolute").depth_mode is DepthMode.Absolute


def _clean():
    return CleanLabel(BOX, 3.5, 1, 3)


def test_full_identity():
    cfg = DapConfig(class_flip_prob=0.0)
    out = make_perturbed_label(_clean(), _scores(0.0, 0.0), cfg, make_rng(5))
    assert out.box == BOX and out.depth == 3.5 and out.class_idx == 1
    assert out.class_onehot.tolist() == [0, 1, 0]


def test_seeded_output_is_stable():
    cfg = DapConfig()
    a = make_perturbed_label(_clean(), _scores(0.7, 0.3), cfg, make_rng(42))
    b = make_perturbed_label(_clean(), _scores(0.7, 0.3), cfg, make_rng(42))
    assert a == b


def test_draw_order():
    # replay the documented order by hand: 4 box signs, depth sign, flip draw, class draw
    cfg = DapConfig(class_flip_prob=1.0)
    out = make_perturbed_label(_clean(), _scores(1.0, 1.0), cfg, make_rng(9))
    u = make_rng(9).random(7)
    signs = np.where(u[:4] < 0.5, 1.0, -1.0)
    expect = perturb_bbox(BOX, _scores(1.0), cfg.gamma_b, signs=signs)
    assert out.box == expect
    assert out.depth == pytest.approx(3.5 * (1 + cfg.gamma_d * (1 if u[4] < 0.5 else -1)), rel=1e-15)
    assert out.class_idx == [0, 2][int(u[6] * 2)]


def test_residual_depth_base():
    assert depth_label(20.0, 21.0, DepthMode.Residual) == -1.0
    assert depth_label(20.0, 21.0, DepthMode.Absolute) == 20.0


def test_clean_label_from_kitti_line():
    cal = CameraCalib(721.5377, 721.5377, 609.5593, 172.854, 1242.0, 375.0)
    l = parse_label_line("Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59")
    c = clean_label_from_object(l, cal, mode=DepthMode.Residual)
    d_geo = 721.5377 * 1.65 / (200.12 - 173.33)
    assert c.d_geo == pytest.approx(d_geo, rel=1e-12)
    assert c.depth == pytest.approx(46.70 - d_geo, rel=1e-12)
    assert c.class_idx == 0 and c.num_classes == 3
    assert c.box.x_proj == pytest.approx((587.01 + 614.12) / 2 / 1242.0, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32), st.floats(0, 1), st.floats(0, 1))
def test_scale_monotone(seed, a, b):
    lo, hi = sorted((a, b))
    r1, r2 = make_rng(seed), make_rng(seed)
    p1 = reparameterize(perturb_bbox(BOX, _scores(lo), 0.4, r1)).as_tuple()
    p2 = reparameterize(perturb_bbox(BOX, _scores(hi), 0.4, r2)).as_tuple()
    c = reparameterize(BOX).as_tuple()
    assert all(abs(y - x) >= abs(z - x) - 1e-15 for x, y, z in zip(c, p2, p1))
