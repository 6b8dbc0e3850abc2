import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labeldenoise.errors import BehindCamera, DegenerateBox, NonFinite
from labeldenoise.geometry import (
    EPS,
    Box3D,
    CameraCalib,
    CornerBox,
    ProjectedBox,
    clip_unit,
    geometric_depth,
    inverse_reparameterize,
    project_box3d,
    reparameterize,
)


def test_reparameterize_examples():
    c = reparameterize(ProjectedBox(0.5, 0.5, 0.1, 0.2, 0.1, 0.2))
    assert c.as_tuple() == pytest.approx((0.4, 0.3, 0.6, 0.7), abs=1e-15)
    c = reparameterize(ProjectedBox(0.5, 0.5, 1e-6, 1e-6, 1e-6, 1e-6))
    assert c.as_tuple() == pytest.approx((0.499999, 0.499999, 0.500001, 0.500001), abs=1e-15)
    c = reparameterize(ProjectedBox(0.3, 0.7, 0.3, 0.7, 0.7, 0.3))
    assert c.as_tuple() == pytest.approx((0.0, 0.0, 1.0, 1.0), abs=1e-15)


def test_inverse_reparameterize_examples():
    b = inverse_reparameterize(CornerBox(0.4, 0.3, 0.6, 0.7))
    assert b.as_tuple() == pytest.approx((0.5, 0.5, 0.1, 0.2, 0.1, 0.2), abs=1e-15)
    b = inverse_reparameterize(CornerBox(0.0, 0.0, 1.0, 1.0))
    assert b.as_tuple() == (0.5, 0.5, 0.5, 0.5, 0.5, 0.5)
    c = CornerBox(0.4, 0.3, 0.6, 0.7)
    assert reparameterize(inverse_reparameterize(c)).as_tuple() == pytest.approx(c.as_tuple(), abs=1e-15)


def test_inverse_reparameterize_rejects_thin_boxes():
    with pytest.raises(DegenerateBox):
        inverse_reparameterize(CornerBox(0.5, 0.1, 0.5 + 2 * EPS, 0.4))
    with pytest.raises(DegenerateBox):
        inverse_reparameterize(CornerBox(0.1, 0.5, 0.4, 0.5 + EPS))


def test_invalid_boxes_rejected():
    with pytest.raises(DegenerateBox):
        ProjectedBox(0.5, 0.5, 0.6, 0.1, 0.1, 0.1)
    with pytest.raises(DegenerateBox):
        ProjectedBox(0.5, 0.5, 0.0, 0.1, 0.1, 0.1)
    with pytest.raises(DegenerateBox):
        CornerBox(0.6, 0.1, 0.4, 0.2)
    with pytest.raises(NonFinite):
        ProjectedBox(float("nan"), 0.5, 0.1, 0.1, 0.1, 0.1)
    with pytest.raises(DegenerateBox):
        ProjectedBox(0.5, 0.5, 0.1, 0.1, 0.1, 0.1).check_min_offset(0.2)


corner_strategy = st.tuples(
    st.floats(0, 1, allow_nan=False), st.floats(0, 1, allow_nan=False),
    st.floats(0, 1, allow_nan=False), st.floats(0, 1, allow_nan=False),
).filter(lambda c: abs(c[0] - c[2]) > 3 * EPS and abs(c[1] - c[3]) > 3 * EPS)


@settings(max_examples=300, deadline=None)
@given(corner_strategy)
def test_corner_round_trip_property(c):
    box = CornerBox(min(c[0], c[2]), min(c[1], c[3]), max(c[0], c[2]), max(c[1], c[3]))
    back = reparameterize(inverse_reparameterize(box))
    assert np.allclose(back.as_tuple(), box.as_tuple(), rtol=0, atol=1e-12)
    assert 0 <= back.x_l < back.x_r <= 1 and 0 <= back.y_t < back.y_b <= 1


def _calib():
    return CameraCalib.centered(700.0, 1280.0, 384.0)


def test_project_on_axis_box_is_centered():
    b = project_box3d(Box3D(0, 0, 20, 2, 2, 4), _calib())
    assert b.x_proj == pytest.approx(0.5, abs=1e-12)
    assert b.y_proj == pytest.approx(0.5, abs=1e-12)


def test_project_farther_box_is_contained():
    near = reparameterize(project_box3d(Box3D(0, 0, 20, 2, 2, 4), _calib()))
    far = reparameterize(project_box3d(Box3D(0, 0, 40, 2, 2, 4), _calib()))
    assert near.x_l < far.x_l < far.x_r < near.x_r
    assert near.y_t < far.y_t < far.y_b < near.y_b


def test_project_matches_hand_projection():
    # independent oracle: enumerate the eight corners with explicit trig
    cal = CameraCalib(721.5, 719.0, 611.0, 170.5, 1242.0, 375.0)
    x, y, z, h, w, l, yaw = 2.3, 1.1, 17.4, 1.52, 1.63, 3.9, 0.37
    us, vs = [], []
    for sx in (-1, 1):
        for sy in (-1, 1):
            for sz in (-1, 1):
                px, py, pz = sx * l / 2, sy * h / 2, sz * w / 2
                cx = math.cos(yaw) * px + math.sin(yaw) * pz + x
                cz = -math.sin(yaw) * px + math.cos(yaw) * pz + z
                cy = py + y
                us.append(cal.fx * cx / cz + cal.cx)
                vs.append(cal.fy * cy / cz + cal.cy)
    expect = (min(us) / cal.img_w, min(vs) / cal.img_h, max(us) / cal.img_w, max(vs) / cal.img_h)
    got = reparameterize(project_box3d(Box3D(x, y, z, h, w, l, yaw), cal))
    assert np.allclose(got.as_tuple(), expect, rtol=0, atol=1e-9)


def test_project_behind_camera():
    with pytest.raises(BehindCamera):
        project_box3d(Box3D(0, 0, 1.0, 1.5, 1.6, 4.0, math.pi / 2), _calib())


def test_project_outside_image():
    with pytest.raises(DegenerateBox):
        project_box3d(Box3D(200, 0, 10, 1.5, 1.6, 4.0), _calib())


def test_project_translation_monotone():
    xs = [project_box3d(Box3D(x, 0, 30, 1.5, 1.6, 4.0), _calib()).x_proj for x in np.linspace(-10, 10, 21)]
    assert np.all(np.diff(xs) > 0)


def test_geometric_depth_examples():
    assert geometric_depth(1.5, 52.5, 700) == pytest.approx(20.0, rel=1e-15)
    assert geometric_depth(1.5, 700 * 1.5, 700) == pytest.approx(1.0, rel=1e-15)
    assert geometric_depth(1.7, 30, 720) == pytest.approx(2 * geometric_depth(1.7, 60, 720), rel=1e-15)
    with pytest.raises(DegenerateBox):
        geometric_depth(1.5, 0.0, 700)


@given(st.floats(0.1, 5), st.floats(1, 400), st.floats(100, 2000))
def test_geometric_depth_inverse(h, px, fy):
    assert geometric_depth(h, px, fy) * px / fy == pytest.approx(h, rel=1e-12)


def test_clip_unit():
    assert clip_unit(0.5) == 0.5
    assert clip_unit(-0.2) == 0.0
    assert clip_unit(1.7) == 1.0
    for bad in (float("nan"), float("inf"), -float("inf")):
        with pytest.raises(NonFinite):
            clip_unit(bad)


def test_calib_validation():
    with pytest.raises(ValueError):
        CameraCalib(0, 700, 600, 180, 1242, 375)
    with pytest.raises(ValueError):
        CameraCalib(700, 700, 600, 180, 0, 375)
