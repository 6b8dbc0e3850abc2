"""Anchor queries and grouped perturbed label queries.

A query vector is ``[x_proj, y_proj, o_l, o_t, o_r, o_b, depth, onehot(C)]``.

``build_groups`` creates N groups over K clean labels.  Each group holds K
positive queries followed by K negative queries (so query ``g*2K + k`` is the
positive of object k in group g and ``g*2K + K + k`` its negative).  Within a
group a negative reuses every sign of its positive but adds 1 to the scale,
and is supervised only towards the no-object class (index C).

Random draws for one call: a single ``rng.random((N, K, 6))`` block with
slots (l, t, r, b, depth, class-flip), then one uniform per fired flip in
row-major (group, object) order choosing the replacement class.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dap import CleanLabel, DapConfig, perturb_corner_array, shifted_box
from .errors import EmptyLabels
from .geometry import ProjectedBox
from .rng import signs_from_uniform
from .uncertainty import ATTRS, DifficultyScores


class QueryKind(str, enum.Enum):
    Anchor = "anchor"
    Positive = "positive"
    Negative = "negative"


@dataclass(frozen=True)
class LabelQuery:
    vec: np.ndarray
    kind: QueryKind = QueryKind.Anchor
    group: int = 0
    gt_index: Optional[int] = None

    def __post_init__(self):
        if self.kind is not QueryKind.Anchor and self.gt_index is None:
            raise ValueError("perturbed queries must carry gt_index")


def query_vector(box6, depth: float, class_idx: int, num_classes: int) -> np.ndarray:
    vec = np.zeros(7 + num_classes)
    vec[:6] = box6
    vec[6] = depth
    vec[7 + class_idx] = 1.0
    return vec


def build_dab_query(box: ProjectedBox, depth: float, class_idx: int, num_classes: int) -> LabelQuery:
    if not 0 <= class_idx < num_classes:
        raise ValueError(f"class index {class_idx} outside [0, {num_classes})")
    return LabelQuery(query_vector(box.as_tuple(), depth, class_idx, num_classes))


def corner_array(box6: np.ndarray) -> np.ndarray:
    """Vectorized reparameterize over (..., 6) center/offset rows."""
    box6 = np.asarray(box6, dtype=np.float64)
    x, y, o_l, o_t, o_r, o_b = np.moveaxis(box6, -1, 0)
    return np.stack(
        [np.maximum(x - o_l, 0.0), np.maximum(y - o_t, 0.0), np.minimum(x + o_r, 1.0), np.minimum(y + o_b, 1.0)],
        axis=-1,
    )


def attention_mask(num_groups: int, num_objects: int, num_anchors: int = 0) -> np.ndarray:
    """Boolean mask over [perturbed queries..., anchors...]; True blocks attention.

    Perturbed queries see only their own group; anchors see only anchors.
    """
    n_pert = 2 * num_groups * num_objects
    group_id = np.concatenate([np.repeat(np.arange(num_groups), 2 * num_objects), np.full(num_anchors, -1)])
    return group_id[:, None] != group_id[None, :] if n_pert + num_anchors else np.zeros((0, 0), bool)


@dataclass
class PerturbGroupSet:
    """Perturbed queries for N groups over K objects, stored as arrays.

    ``vecs`` has shape (2NK, 7+C).  ``signs`` (N, K, 5) and ``scales`` (K, 5)
    hold the shared draws and group-agnostic positive scales, both in
    ``ATTRS`` order; ``pre_clip`` holds the per-query corner deltas before
    clipping.
    """

    vecs: np.ndarray
    kinds: np.ndarray
    groups: np.ndarray
    gt_index: np.ndarray
    num_groups: int
    num_objects: int
    num_classes: int
    signs: np.ndarray
    scales: np.ndarray
    pre_clip: np.ndarray
    num_anchors: int = 0
    _mask: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.vecs)

    @property
    def queries(self) -> list[LabelQuery]:
        return [
            LabelQuery(self.vecs[i], QueryKind(self.kinds[i]), int(self.groups[i]), int(self.gt_index[i]))
            for i in range(len(self))
        ]

    @property
    def positive(self) -> np.ndarray:
        return self.kinds == QueryKind.Positive.value

    @property
    def attention_mask(self) -> np.ndarray:
        if self._mask is None:
            self._mask = attention_mask(self.num_groups, self.num_objects, self.num_anchors)
        return self._mask

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = ["x_proj", "y_proj", "o_l", "o_t", "o_r", "o_b", "depth"]
        names += [f"cls{i}" for i in range(self.num_classes)]
        w.writerow(["kind", "group", "gt_index", *names])
        for i in range(len(self)):
            w.writerow([self.kinds[i], int(self.groups[i]), int(self.gt_index[i]), *(repr(float(v)) for v in self.vecs[i])])
        return buf.getvalue()


def clean_arrays(labels: Sequence[CleanLabel]):
    box = np.array([l.box.as_tuple() for l in labels], dtype=np.float64)
    depth = np.array([l.depth for l in labels], dtype=np.float64)
    cls = np.array([l.class_idx for l in labels], dtype=np.int64)
    return box, depth, cls


def _score_array(scores) -> np.ndarray:
    if len(scores) and isinstance(scores[0], DifficultyScores):
        return np.array([s.as_array() for s in scores])
    return np.asarray(scores, dtype=np.float64).reshape(-1, len(ATTRS))


def build_groups(
    labels: Sequence[CleanLabel],
    scores,
    cfg: DapConfig,
    num_groups: int,
    rng: np.random.Generator,
    num_anchors: int = 0,
) -> PerturbGroupSet:
    """Positive and negative perturbed queries for ``num_groups`` groups.

    Args:
        labels: K clean labels sharing one class count C.
        scores: per-label ``DifficultyScores`` or a (K, 5) array in ``ATTRS`` order.
        cfg: perturbation factors and class flip probability.
        num_groups: N, the number of sign-randomized groups.
        rng: source of all draws (see module docstring for the order).
        num_anchors: anchors appended after the perturbed block in the mask.

    Raises:
        EmptyLabels: if ``labels`` is empty.
    """
    if not labels:
        raise EmptyLabels("cannot build perturbation groups without labels")
    if num_groups < 1:
        raise ValueError(f"need at least one group, got {num_groups}")
    C = labels[0].num_classes
    K, N = len(labels), num_groups
    box, depth, cls = clean_arrays(labels)
    s = _score_array(scores)
    if s.shape != (K, len(ATTRS)):
        raise ValueError(f"expected scores of shape {(K, len(ATTRS))}, got {s.shape}")
    if np.any(s < 0) or np.any(s > 1):
        raise ValueError("difficulty scores must lie in [0, 1]")

    scales = np.empty_like(s)
    scales[:, 0] = s[:, 0] * cfg.gamma_d
    scales[:, 1:] = s[:, 1:] * cfg.gamma_b

    u = rng.random((N, K, 6))
    signs = signs_from_uniform(u[..., :5])
    flipped = u[..., 5] < cfg.class_flip_prob
    if C < 2:
        flipped[:] = False
    new_cls = np.broadcast_to(cls, (N, K)).copy()
    if flipped.any():
        choice = rng.random(int(flipped.sum()))
        k = np.minimum((choice * (C - 1)).astype(np.int64), C - 2)
        orig = new_cls[flipped]
        new_cls[flipped] = k + (k >= orig)

    corners = corner_array(box)
    offsets = box[:, 2:6]
    # signs are stored in ATTRS order (d, l, t, r, b) but drawn in (l, t, r, b, d) slots
    signs = np.concatenate([signs[..., 4:5], signs[..., :4]], axis=-1)
    pos_c, pos_d = perturb_corner_array(corners[None], offsets[None], scales[None, :, 1:], signs[..., 1:])
    neg_c, neg_d = perturb_corner_array(corners[None], offsets[None], scales[None, :, 1:], signs[..., 1:], negative=True)
    pos_depth = depth + depth * scales[:, 0] * signs[..., 0]
    neg_depth = depth + depth * (scales[:, 0] + 1.0) * signs[..., 0]

    width = 7 + C
    vecs = np.zeros((N, 2, K, width))
    vecs[:, 0, :, :6] = shifted_box(box[None], corners[None], pos_c)
    vecs[:, 1, :, :6] = shifted_box(box[None], corners[None], neg_c)
    vecs[:, 0, :, 6] = pos_depth
    vecs[:, 1, :, 6] = neg_depth
    onehot = np.eye(C)[new_cls]
    vecs[:, 0, :, 7:] = onehot
    vecs[:, 1, :, 7:] = onehot

    kinds = np.empty((N, 2, K), dtype=object)
    kinds[:, 0] = QueryKind.Positive.value
    kinds[:, 1] = QueryKind.Negative.value
    groups = np.broadcast_to(np.arange(N)[:, None, None], (N, 2, K))
    gt = np.broadcast_to(np.arange(K), (N, 2, K))
    pre_clip = np.stack([pos_d, neg_d], axis=1)
    return PerturbGroupSet(
        vecs=vecs.reshape(-1, width),
        kinds=kinds.reshape(-1),
        groups=groups.reshape(-1).copy(),
        gt_index=gt.reshape(-1).copy(),
        num_groups=N,
        num_objects=K,
        num_classes=C,
        signs=signs,
        scales=scales,
        pre_clip=pre_clip.reshape(-1, 4),
        num_anchors=num_anchors,
    )


@dataclass(frozen=True)
class ReconTarget:
    """Supervision for one perturbed query; ``label`` is None for negatives."""

    label: Optional[CleanLabel]
    class_target: int


def reconstruction_targets(gs: PerturbGroupSet, clean: Sequence[CleanLabel]) -> list[tuple[int, ReconTarget]]:
    out = []
    for i in range(len(gs)):
        k = int(gs.gt_index[i])
        if gs.kinds[i] == QueryKind.Positive.value:
            out.append((i, ReconTarget(clean[k], clean[k].class_idx)))
        else:
            out.append((i, ReconTarget(None, gs.num_classes)))
    return out
