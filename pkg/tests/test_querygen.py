import numpy as np
import pytest

from labeldenoise.dap import CleanLabel, DapConfig
from labeldenoise.errors import EmptyLabels
from labeldenoise.geometry import ProjectedBox
from labeldenoise.querygen import (
    LabelQuery,
    QueryKind,
    attention_mask,
    build_dab_query,
    build_groups,
    corner_array,
    reconstruction_targets,
)
from labeldenoise.rng import make_rng

BOX = ProjectedBox(0.5, 0.5, 0.1, 0.2, 0.1, 0.2)


def _labels(k, rng=None, C=3):
    rng = rng or np.random.default_rng(k)
    out = []
    for i in range(k):
        x, y = rng.uniform(0.2, 0.8, 2)
        o = rng.uniform(0.01, 0.15, 4)
        out.append(CleanLabel(ProjectedBox(x, y, *o), float(rng.uniform(-2, 2)), i % C, C))
    return out


def test_dab_query_examples():
    q = build_dab_query(BOX, 20.0, 0, 3)
    assert q.vec.tolist() == [0.5, 0.5, 0.1, 0.2, 0.1, 0.2, 20.0, 1.0, 0.0, 0.0]
    assert q.kind is QueryKind.Anchor and q.gt_index is None
    assert len(build_dab_query(BOX, 20.0, 0, 1).vec) == 8
    other = build_dab_query(ProjectedBox(0.4, 0.5, 0.1, 0.2, 0.1, 0.2), 20.0, 0, 3)
    assert not np.array_equal(q.vec, other.vec)
    with pytest.raises(ValueError):
        LabelQuery(q.vec, QueryKind.Positive)


def test_group_counts():
    gs = build_groups(_labels(3), np.full((3, 5), 0.5), DapConfig(), 7, make_rng(0))
    assert len(gs) == 42
    gs = build_groups(_labels(1), np.full((1, 5), 0.5), DapConfig(), 1, make_rng(0))
    assert [q.kind for q in gs.queries] == [QueryKind.Positive, QueryKind.Negative]
    with pytest.raises(EmptyLabels):
        build_groups([], np.zeros((0, 5)), DapConfig(), 1, make_rng(0))


def test_negative_shares_signs_with_larger_magnitude():
    labels = _labels(4)
    scores = np.random.default_rng(2).uniform(0, 1, (4, 5))
    gs = build_groups(labels, scores, DapConfig(), 3, make_rng(5))
    K = 4
    offs = np.array([l.box.offsets for l in labels])
    for g in range(3):
        for k in range(K):
            pos = gs.pre_clip[g * 2 * K + k]
            neg = gs.pre_clip[g * 2 * K + K + k]
            assert np.all(np.sign(pos) == np.sign(neg))
            assert np.all(np.abs(neg) > offs[k])
            assert np.all(np.abs(pos) < offs[k])
            assert np.array_equal(np.abs(neg), offs[k] * (scores[k, 1:] * 0.4 + 1.0))


def test_negative_geometry_bounds():
    labels = _labels(20)
    gs = build_groups(labels, np.ones((20, 5)), DapConfig(), 8, make_rng(1))
    neg = ~gs.positive
    c = corner_array(gs.vecs[neg, :6])
    assert np.all(c >= 0) and np.all(c <= 1)
    assert np.all(c[:, 0] <= c[:, 2]) and np.all(c[:, 1] <= c[:, 3])


def test_positive_matches_scalar_dap():
    from labeldenoise.dap import perturb_bbox
    from labeldenoise.uncertainty import ATTRS, DifficultyScores

    labels = _labels(5)
    scores = np.random.default_rng(8).uniform(0, 1, (5, 5))
    gs = build_groups(labels, scores, DapConfig(), 2, make_rng(4))
    for g in range(2):
        for k in range(5):
            sc = DifficultyScores(dict(zip(ATTRS, scores[k])))
            expect = perturb_bbox(labels[k].box, sc, 0.4, signs=gs.signs[g, k, 1:])
            got = gs.vecs[g * 10 + k, :6]
            assert np.array_equal(got, expect.as_tuple())


def test_attention_mask_blocks():
    m = attention_mask(2, 3, num_anchors=4)
    assert m.shape == (16, 16)
    assert not m[:6, :6].any() and not m[6:12, 6:12].any() and not m[12:, 12:].any()
    assert m[:6, 6:].all() and m[6:12, :6].all() and m[6:12, 12:].all() and m[12:, :12].all()


def test_reconstruction_targets():
    labels = _labels(3)
    gs = build_groups(labels, np.full((3, 5), 0.5), DapConfig(), 2, make_rng(0))
    targets = reconstruction_targets(gs, labels)
    assert len(targets) == len(gs)
    for i, t in targets:
        if gs.kinds[i] == "positive":
            assert t.label is labels[gs.gt_index[i]] and t.class_target == labels[gs.gt_index[i]].class_idx
        else:
            assert t.label is None and t.class_target == 3


def test_csv_golden_shape():
    gs = build_groups(_labels(2), np.full((2, 5), 0.5), DapConfig(), 1, make_rng(0))
    lines = gs.to_csv().splitlines()
    assert lines[0].split(",")[:4] == ["kind", "group", "gt_index", "x_proj"]
    assert len(lines) == 5 and all(len(l.split(",")) == 3 + 10 for l in lines)
    again = build_groups(_labels(2), np.full((2, 5), 0.5), DapConfig(), 1, make_rng(0))
    assert again.to_csv() == gs.to_csv()
