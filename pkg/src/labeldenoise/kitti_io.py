"""KITTI object label and calibration files.

Label lines hold 15 whitespace separated fields (16 with a detection score)::

    type truncated occluded alpha left top right bottom h w l x y z rotation_y [score]

``loc`` is the bottom center of the box in the rectified camera frame.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from .errors import BadNumber, MalformedLine, MissingP2, UnknownCategory
from .geometry import Box3D, CameraCalib

CATEGORIES = (
    "Car",
    "Pedestrian",
    "Cyclist",
    "Van",
    "Truck",
    "Person_sitting",
    "Tram",
    "Misc",
    "DontCare",
)


class DifficultyLevel(enum.IntEnum):
    Easy = 1
    Moderate = 2
    Hard = 3
    Ignored = 4


# (min pixel height, max occlusion, max truncation), checked in order
DIFFICULTY_THRESHOLDS = (
    (DifficultyLevel.Easy, 40.0, 0, 0.15),
    (DifficultyLevel.Moderate, 25.0, 1, 0.30),
    (DifficultyLevel.Hard, 25.0, 2, 0.50),
)


@dataclass(frozen=True)
class ObjectLabel:
    category: str
    truncated: float
    occluded: int
    alpha: float
    bbox2d: tuple[float, float, float, float]
    dims: tuple[float, float, float]
    loc: tuple[float, float, float]
    rotation_y: float
    score: Optional[float] = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise UnknownCategory(self.category)
        if self.category == "DontCare":
            return
        left, top, right, bottom = self.bbox2d
        if not (left < right and top < bottom):
            raise MalformedLine(f"degenerate 2D box {self.bbox2d}")
        if min(self.dims) <= 0:
            raise MalformedLine(f"non-positive dimensions {self.dims}")

    @property
    def is_dontcare(self) -> bool:
        return self.category == "DontCare"

    @property
    def pixel_height(self) -> float:
        return self.bbox2d[3] - self.bbox2d[1]

    def to_box3d(self) -> Box3D:
        h, w, l = self.dims
        x, y, z = self.loc
        return Box3D(x, y - h / 2.0, z, h, w, l, self.rotation_y)


def _float(tok: str) -> float:
    try:
        value = float(tok)
    except ValueError:
        raise BadNumber(f"cannot parse number {tok!r}") from None
    if not math.isfinite(value):
        raise BadNumber(f"non-finite number {tok!r}")
    return value


def _int(tok: str) -> int:
    value = _float(tok)
    if value != int(value):
        raise BadNumber(f"expected an integer, got {tok!r}")
    return int(value)


def parse_label_line(line: str) -> ObjectLabel:
    fields = line.split()
    if len(fields) not in (15, 16):
        raise MalformedLine(f"expected 15 or 16 fields, got {len(fields)}: {line!r}")
    category = fields[0]
    if category not in CATEGORIES:
        raise UnknownCategory(f"unknown category {category!r}")
    nums = [_float(t) for t in fields[4:]]
    return ObjectLabel(
        category=category,
        truncated=_float(fields[1]),
        occluded=_int(fields[2]),
        alpha=_float(fields[3]),
        bbox2d=tuple(nums[0:4]),
        dims=tuple(nums[4:7]),
        loc=tuple(nums[7:10]),
        rotation_y=nums[10],
        score=nums[11] if len(fields) == 16 else None,
    )


def _fmt(x: float) -> str:
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def _fmt_sentinel(x: float) -> str:
    # DontCare rows carry integer sentinels (-1, -10, -1000) written without decimals
    return str(int(x)) if x == int(x) else _fmt(x)


def serialize_label(l: ObjectLabel) -> str:
    fmt = _fmt_sentinel if l.is_dontcare else _fmt
    parts = [l.category, fmt(l.truncated), str(l.occluded), fmt(l.alpha)]
    parts += [_fmt(v) for v in l.bbox2d]
    parts += [fmt(v) for v in l.dims]
    parts += [fmt(v) for v in l.loc]
    parts.append(fmt(l.rotation_y))
    if l.score is not None:
        parts.append(_fmt(l.score))
    return " ".join(parts)


def parse_label_text(text: str) -> list[ObjectLabel]:
    return [parse_label_line(line) for line in text.splitlines() if line.strip()]


def serialize_labels(labels: Iterable[ObjectLabel]) -> str:
    return "".join(serialize_label(l) + "\n" for l in labels)


def read_label_file(path) -> list[ObjectLabel]:
    return parse_label_text(Path(path).read_text())


def write_label_file(path, labels: Iterable[ObjectLabel]) -> None:
    Path(path).write_text(serialize_labels(labels), newline="\n")


def parse_calib(text: str, img_w: float = 1242.0, img_h: float = 375.0) -> CameraCalib:
    """Camera intrinsics from the ``P2`` row of a calibration file.

    Image size is not stored in KITTI calibration files and is passed in;
    the defaults are the common KITTI resolution.
    """
    for line in text.splitlines():
        if not line.startswith("P2:"):
            continue
        toks = line[3:].split()
        if len(toks) != 12:
            raise BadNumber(f"P2 row needs 12 numbers, got {len(toks)}")
        p = [_float(t) for t in toks]
        return CameraCalib(fx=p[0], fy=p[5], cx=p[2], cy=p[6], img_w=img_w, img_h=img_h)
    raise MissingP2("no 'P2:' line in calibration text")


def serialize_calib(cal: CameraCalib) -> str:
    """Calibration file text with the usual KITTI keys; only P2 carries the camera."""
    p2 = [cal.fx, 0.0, cal.cx, 0.0, 0.0, cal.fy, cal.cy, 0.0, 0.0, 0.0, 1.0, 0.0]
    eye34 = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]
    eye33 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
    rows = [
        ("P0", p2),
        ("P1", p2),
        ("P2", p2),
        ("P3", p2),
        ("R0_rect", eye33),
        ("Tr_velo_to_cam", eye34),
        ("Tr_imu_to_velo", eye34),
    ]
    return "".join(f"{k}: " + " ".join(f"{v:.12e}" for v in vals) + "\n" for k, vals in rows)


def read_calib_file(path, img_w: float = 1242.0, img_h: float = 375.0) -> CameraCalib:
    return parse_calib(Path(path).read_text(), img_w, img_h)


def assign_difficulty(l: ObjectLabel, pixel_height: Optional[float] = None) -> DifficultyLevel:
    """KITTI benchmark difficulty from 2D height, occlusion and truncation."""
    if pixel_height is None:
        pixel_height = l.pixel_height
    for level, min_height, max_occ, max_trunc in DIFFICULTY_THRESHOLDS:
        if pixel_height >= min_height and l.occluded <= max_occ and l.truncated <= max_trunc:
            return level
    return DifficultyLevel.Ignored
