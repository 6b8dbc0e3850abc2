"""Difficulty-aware perturbation of box, depth and class labels.

Perturbation size per attribute is ``offset * score * sign * gamma`` for the
four box corners and ``depth * score * sign * gamma`` for depth, where
``score`` is the normalized certainty from :mod:`labeldenoise.uncertainty`.
Confident (easy) instances therefore receive the largest perturbations.

Random draw order for one label (``make_perturbed_label``): four box signs
in l, t, r, b order, one depth sign, one class-flip uniform, and one extra
uniform choosing the new class only when the flip fires.  Signs are drawn
as uniforms and mapped with :func:`labeldenoise.rng.signs_from_uniform`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import NonFinite, SingleClass
from .geometry import (
    EPS,
    CameraCalib,
    ProjectedBox,
    geometric_depth,
    inverse_reparameterize,
    pixel_to_corner_box,
    reparameterize,
)
from .kitti_io import ObjectLabel
from .rng import draw_sign
from .uncertainty import DifficultyScores

DEFAULT_CLASSES = ("Car", "Pedestrian", "Cyclist")


class DepthMode(str, enum.Enum):
    Absolute = "absolute"
    Residual = "residual"


@dataclass(frozen=True)
class DapConfig:
    gamma_b: float = 0.4
    gamma_d: float = 0.8
    class_flip_prob: float = 0.2
    depth_mode: DepthMode = DepthMode.Residual
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma_b < 1.0:
            raise ValueError(f"gamma_b must lie strictly inside (0, 1), got {self.gamma_b}")
        if not 0.0 < self.gamma_d < 1.0:
            raise ValueError(f"gamma_d must lie strictly inside (0, 1), got {self.gamma_d}")
        if not 0.0 <= self.class_flip_prob <= 1.0:
            raise ValueError(f"class_flip_prob must lie in [0, 1], got {self.class_flip_prob}")
        object.__setattr__(self, "depth_mode", DepthMode(self.depth_mode))


@dataclass(frozen=True)
class CleanLabel:
    """Denoising-ready view of one object: projected box, depth target, class.

    ``depth`` is absolute depth or ``depth - d_geo`` depending on the mode it
    was built with; ``d_geo`` is kept so residuals can be turned back into
    metric depth.
    """

    box: ProjectedBox
    depth: float
    class_idx: int
    num_classes: int
    d_geo: float = 0.0


@dataclass(frozen=True)
class PerturbedLabel:
    box: ProjectedBox
    depth: float
    class_idx: int
    num_classes: int

    @property
    def class_onehot(self) -> np.ndarray:
        # index num_classes is the no-object slot
        out = np.zeros(self.num_classes + (self.class_idx == self.num_classes))
        out[self.class_idx] = 1.0
        return out


def depth_label(d_gt: float, d_geo: float, mode: DepthMode) -> float:
    """Depth entry of a label query: absolute depth or the residual over ``d_geo``."""
    return d_gt if DepthMode(mode) is DepthMode.Absolute else d_gt - d_geo


def clean_label_from_object(
    label: ObjectLabel,
    cal: CameraCalib,
    classes: Sequence[str] = DEFAULT_CLASSES,
    mode: DepthMode = DepthMode.Residual,
) -> CleanLabel:
    """Build the clean label used for queries from a parsed KITTI object.

    Raises:
        DegenerateBox: when a side of the normalized box is thinner than ``EPS``.
        ValueError: when the category is not in ``classes``.
    """
    box = inverse_reparameterize(pixel_to_corner_box(label.bbox2d, cal)).check_min_offset(EPS)
    d_geo = geometric_depth(label.dims[0], label.pixel_height, cal.fy)
    return CleanLabel(
        box=box,
        depth=depth_label(label.loc[2], d_geo, mode),
        class_idx=list(classes).index(label.category),
        num_classes=len(classes),
        d_geo=d_geo,
    )


def perturb_corner_array(corners, offsets, scale, signs, negative: bool = False):
    """Vectorized corner perturbation over trailing axis (l, t, r, b).

    ``scale`` is ``score * gamma``; negatives add 1 to it.  Returns the clipped
    corners and the pre-clip deltas.  Negatives whose sides cross after
    clipping are swapped back into order.
    """
    corners = np.asarray(corners, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64) + (1.0 if negative else 0.0)
    delta = np.asarray(offsets, dtype=np.float64) * scale * np.asarray(signs, dtype=np.float64)
    out = np.clip(corners + delta, 0.0, 1.0)
    if negative:
        xs = np.sort(out[..., [0, 2]], axis=-1)
        ys = np.sort(out[..., [1, 3]], axis=-1)
        out = np.stack([xs[..., 0], ys[..., 0], xs[..., 1], ys[..., 1]], axis=-1)
    return out, delta


def shifted_box(box6, corners, new_corners) -> np.ndarray:
    """Midpoint center and offsets of ``new_corners`` written as a shift of ``box6``.

    Equivalent to recentering ``new_corners`` directly, but works from the
    corner shifts so an unmoved, midpoint-centered box comes back bit-exact.
    Trailing axes: ``box6`` (..., 6), corners (..., 4).
    """
    x, y, o_l, o_t, o_r, o_b = np.moveaxis(np.asarray(box6, dtype=np.float64), -1, 0)
    e_l, e_t, e_r, e_b = np.moveaxis(np.asarray(new_corners, dtype=np.float64) - corners, -1, 0)
    half_w = 0.5 * (o_l + o_r + e_r - e_l)
    half_h = 0.5 * (o_t + o_b + e_b - e_t)
    xc = x + 0.5 * (o_r - o_l + e_l + e_r)
    yc = y + 0.5 * (o_b - o_t + e_t + e_b)
    xc, yc, half_w, half_h = np.broadcast_arrays(xc, yc, half_w, half_h)
    return np.stack([xc, yc, half_w, half_h, half_w, half_h], axis=-1)


def perturb_bbox(
    b: ProjectedBox,
    scores: DifficultyScores,
    gamma_b: float,
    rng: Optional[np.random.Generator] = None,
    signs: Optional[Sequence[float]] = None,
) -> ProjectedBox:
    """Perturb the four corners of ``b`` and recenter at the new midpoint.

    Signs are drawn from ``rng`` in l, t, r, b order unless given explicitly.
    """
    if signs is None:
        signs = [draw_sign(rng) for _ in range(4)]
    c_hat = np.array(scores.box())
    if np.any(c_hat < 0) or np.any(c_hat > 1):
        raise ValueError(f"box scores must lie in [0, 1], got {c_hat}")
    corners = np.array(reparameterize(b).as_tuple())
    out, _ = perturb_corner_array(corners, b.offsets, c_hat * gamma_b, signs)
    return ProjectedBox(*map(float, shifted_box(b.as_tuple(), corners, out)))


def perturb_depth(
    d: float,
    c_hat_d: float,
    gamma_d: float,
    rng: Optional[np.random.Generator] = None,
    sign: Optional[float] = None,
) -> float:
    if not (math.isfinite(d) and math.isfinite(c_hat_d)):
        raise NonFinite(f"depth perturbation inputs must be finite: d={d}, c_hat={c_hat_d}")
    if sign is None:
        sign = draw_sign(rng)
    return d + d * c_hat_d * sign * gamma_d


def pick_other_class(class_idx: int, num_classes: int, u: float) -> int:
    """Map a uniform in [0, 1) onto the ``num_classes - 1`` classes other than ``class_idx``."""
    k = min(int(u * (num_classes - 1)), num_classes - 2)
    return k + (k >= class_idx)


def flip_class(class_idx: int, num_classes: int, p_flip: float, rng: np.random.Generator) -> int:
    """With probability ``p_flip`` switch to a uniformly chosen different class."""
    if num_classes < 2:
        if p_flip > 0:
            raise SingleClass("label flipping needs at least two classes")
        return class_idx
    if not 0 <= class_idx < num_classes:
        raise ValueError(f"class index {class_idx} outside [0, {num_classes})")
    if rng.random() < p_flip:
        return pick_other_class(class_idx, num_classes, rng.random())
    return class_idx


def make_perturbed_label(
    label: CleanLabel,
    scores: DifficultyScores,
    cfg: DapConfig,
    rng: np.random.Generator,
) -> PerturbedLabel:
    box = perturb_bbox(label.box, scores, cfg.gamma_b, rng)
    depth = perturb_depth(label.depth, scores.c_hat["d"], cfg.gamma_d, rng)
    cls = flip_class(label.class_idx, label.num_classes, cfg.class_flip_prob, rng)
    return PerturbedLabel(box, depth, cls, label.num_classes)

