"""Box parameterizations, pinhole projection and geometric depth.

Two 2D parameterizations live on the normalized image plane (pixel
coordinates divided by image width/height):

* ``ProjectedBox``: a center plus four distances to the left, top, right and
  bottom sides.  This is the layout used inside label queries.
* ``CornerBox``: top-left / bottom-right corners.  Perturbation happens in
  this form.

Camera frame follows KITTI: x right, y down, z forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DegenerateBox, NonFinite

EPS = 1e-6
# slack for round-off when checking [0, 1] bounds of recomputed corners
_BOUND_TOL = 1e-12


@dataclass(frozen=True)
class CameraCalib:
    fx: float
    fy: float
    cx: float
    cy: float
    img_w: float
    img_h: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (self.img_w > 0 and self.img_h > 0):
            raise ValueError(f"image size must be positive, got {self.img_w}x{self.img_h}")

    @classmethod
    def centered(cls, f: float, img_w: float, img_h: float) -> "CameraCalib":
        return cls(f, f, img_w / 2.0, img_h / 2.0, img_w, img_h)


@dataclass(frozen=True)
class Box3D:
    """3D box with its *geometric center* at (x, y, z) in the camera frame."""

    x: float
    y: float
    z: float
    h: float
    w: float
    l: float
    yaw: float = 0.0

    def __post_init__(self):
        if not self.z > 0:
            raise BehindCamera(f"box center depth must be positive, got z={self.z}")
        if not (self.h > 0 and self.w > 0 and self.l > 0):
            raise ValueError(f"box dimensions must be positive, got {(self.h, self.w, self.l)}")

    def corners(self) -> np.ndarray:
        """Eight corners, shape (8, 3), in the camera frame."""
        dx = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * (self.l / 2.0)
        dy = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * (self.h / 2.0)
        dz = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * (self.w / 2.0)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        # rotation about the camera y axis (KITTI rotation_y)
        x = c * dx + s * dz
        z = -s * dx + c * dz
        return np.stack([x + self.x, dy + self.y, z + self.z], axis=1)


@dataclass(frozen=True)
class ProjectedBox:
    x_proj: float
    y_proj: float
    o_l: float
    o_t: float
    o_r: float
    o_b: float

    def __post_init__(self):
        vals = (self.x_proj, self.y_proj, self.o_l, self.o_t, self.o_r, self.o_b)
        if not all(math.isfinite(v) for v in vals):
            raise NonFinite(f"non-finite projected box {vals}")
        if min(self.o_l, self.o_t, self.o_r, self.o_b) <= 0:
            raise DegenerateBox(f"offsets must be positive, got {vals[2:]}")
        if self.x_proj - self.o_l < -_BOUND_TOL or self.x_proj + self.o_r > 1 + _BOUND_TOL:
            raise DegenerateBox(f"horizontal extent leaves [0, 1]: {vals}")
        if self.y_proj - self.o_t < -_BOUND_TOL or self.y_proj + self.o_b > 1 + _BOUND_TOL:
            raise DegenerateBox(f"vertical extent leaves [0, 1]: {vals}")

    @property
    def offsets(self) -> tuple[float, float, float, float]:
        return (self.o_l, self.o_t, self.o_r, self.o_b)

    def as_tuple(self) -> tuple[float, ...]:
        return (self.x_proj, self.y_proj, self.o_l, self.o_t, self.o_r, self.o_b)

    def check_min_offset(self, eps: float = EPS) -> "ProjectedBox":
        """Reject boxes thinner than ``eps`` on any side (label ingestion rule)."""
        if min(self.offsets) <= eps:
            raise DegenerateBox(f"offset below minimum {eps}: {self.offsets}")
        return self


@dataclass(frozen=True)
class CornerBox:
    x_l: float
    y_t: float
    x_r: float
    y_b: float

    def __post_init__(self):
        vals = self.as_tuple()
        if not all(math.isfinite(v) for v in vals):
            raise NonFinite(f"non-finite corner box {vals}")
        if not (-_BOUND_TOL <= self.x_l < self.x_r <= 1 + _BOUND_TOL):
            raise DegenerateBox(f"invalid horizontal corners {vals}")
        if not (-_BOUND_TOL <= self.y_t < self.y_b <= 1 + _BOUND_TOL):
            raise DegenerateBox(f"invalid vertical corners {vals}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_l, self.y_t, self.x_r, self.y_b)


def clip_unit(x: float) -> float:
    if not math.isfinite(x):
        raise NonFinite(f"cannot clip non-finite value {x}")
    return min(max(x, 0.0), 1.0)


def reparameterize(b: ProjectedBox) -> CornerBox:
    """Center/offset form to corner form."""
    # the clamp only absorbs round-off; valid inputs already lie in [0, 1]
    return CornerBox(
        max(b.x_proj - b.o_l, 0.0),
        max(b.y_proj - b.o_t, 0.0),
        min(b.x_proj + b.o_r, 1.0),
        min(b.y_proj + b.o_b, 1.0),
    )


def recenter(x_l: float, y_t: float, x_r: float, y_b: float) -> tuple[float, ...]:
    """Midpoint center and side distances of raw corners, without validation."""
    xc = 0.5 * (x_l + x_r)
    yc = 0.5 * (y_t + y_b)
    return (xc, yc, xc - x_l, yc - y_t, x_r - xc, y_b - yc)


def inverse_reparameterize(c: CornerBox, eps: float = EPS) -> ProjectedBox:
    """Corner form back to center/offset form, centered at the box midpoint.

    Raises:
        DegenerateBox: if either side length is at most ``2 * eps``.
    """
    if c.x_r - c.x_l <= 2 * eps or c.y_b - c.y_t <= 2 * eps:
        raise DegenerateBox(f"corner box too thin to recenter: {c.as_tuple()}")
    return ProjectedBox(*recenter(*c.as_tuple()))


def project_points(pts: np.ndarray, cal: CameraCalib) -> np.ndarray:
    """Pinhole projection of (N, 3) camera-frame points to (N, 2) pixels."""
    pts = np.asarray(pts, dtype=np.float64)
    if np.any(pts[:, 2] <= 0):
        raise BehindCamera("point at or behind the image plane")
    u = cal.fx * pts[:, 0] / pts[:, 2] + cal.cx
    v = cal.fy * pts[:, 1] / pts[:, 2] + cal.cy
    return np.stack([u, v], axis=1)


def enclosing_pixel_box(b: Box3D, cal: CameraCalib, clip: bool = True) -> tuple[float, float, float, float]:
    """Tight (left, top, right, bottom) pixel box around the projected corners."""
    uv = project_points(b.corners(), cal)
    left, top = uv.min(axis=0)
    right, bottom = uv.max(axis=0)
    if clip:
        left, right = np.clip([left, right], 0.0, cal.img_w)
        top, bottom = np.clip([top, bottom], 0.0, cal.img_h)
    return float(left), float(top), float(right), float(bottom)


def pixel_to_corner_box(bbox: tuple[float, float, float, float], cal: CameraCalib) -> CornerBox:
    left, top, right, bottom = bbox
    return CornerBox(
        clip_unit(left / cal.img_w),
        clip_unit(top / cal.img_h),
        clip_unit(right / cal.img_w),
        clip_unit(bottom / cal.img_h),
    )


def project_box3d(b: Box3D, cal: CameraCalib) -> ProjectedBox:
    """Normalized projected box of a 3D box, recentered at the clipped 2D box midpoint.

    Raises:
        BehindCamera: if any corner is at or behind the camera plane.
        DegenerateBox: if the box falls outside the image or collapses when clipped.
    """
    left, top, right, bottom = enclosing_pixel_box(b, cal, clip=True)
    corners = (left / cal.img_w, top / cal.img_h, right / cal.img_w, bottom / cal.img_h)
    if corners[2] - corners[0] <= 2 * EPS or corners[3] - corners[1] <= 2 * EPS:
        raise DegenerateBox(f"projected box collapses after clipping: {corners}")
    return inverse_reparameterize(CornerBox(*corners))


def geometric_depth(h3d: float, pixel_height: float, fy: float) -> float:
    """Depth implied by a 3D height that spans ``pixel_height`` pixels."""
    if not pixel_height > 0:
        raise DegenerateBox(f"pixel height must be positive, got {pixel_height}")
    if not h3d > 0:
        raise ValueError(f"3D height must be positive, got {h3d}")
    return fy * h3d / pixel_height
