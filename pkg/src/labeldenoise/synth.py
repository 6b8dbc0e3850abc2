"""Synthetic monocular scenes written as KITTI label/calibration files.

Objects stand on a ground plane 1.65 m below the camera.  Each object gets a
noise stratum from its true depth band (near / mid / far by default); the
stratum sets the observation noise added to depth and 2D box corners of the
"annotated" label.  The noise-free label is kept alongside as truth.

On-disk layout::

    root/
      calib/NNNNNN.txt      camera (P2)
      label_2/NNNNNN.txt    annotated (noisy) labels
      truth_2/NNNNNN.txt    noise-free labels
      objects.csv           scene, object, stratum, difficulty
      manifest.txt          key = value record of generation settings
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import BehindCamera, DegenerateBox, EmptyScene
from .geometry import EPS, Box3D, CameraCalib, enclosing_pixel_box
from .kitti_io import (
    DifficultyLevel,
    ObjectLabel,
    assign_difficulty,
    read_calib_file,
    read_label_file,
    serialize_calib,
    write_label_file,
)
from .rng import make_rng

CAMERA_HEIGHT = 1.65
MAX_ATTEMPTS = 100
KITTI_CALIB = CameraCalib(fx=721.5377, fy=721.5377, cx=609.5593, cy=172.854, img_w=1242.0, img_h=375.0)

# per class (mean, std) of (h, w, l) in meters
DEFAULT_DIMS = {
    "Car": ((1.53, 1.63, 3.88), (0.10, 0.08, 0.30)),
    "Pedestrian": ((1.76, 0.66, 0.84), (0.10, 0.06, 0.10)),
    "Cyclist": ((1.74, 0.60, 1.76), (0.08, 0.06, 0.10)),
}


@dataclass(frozen=True)
class SceneConfig:
    num_objects_min: int = 3
    num_objects_max: int = 8
    depth_min: float = 8.0
    depth_max: float = 50.0
    classes: tuple[str, ...] = ("Car", "Pedestrian", "Cyclist")
    class_probs: tuple[float, ...] = (0.6, 0.25, 0.15)
    occlusion_prob: float = 0.3
    truncation_prob: float = 0.1
    # depth band edges separating the noise strata
    strata_edges: tuple[float, ...] = (22.0, 36.0)
    depth_noise: tuple[float, ...] = (0.1, 0.5, 1.5)
    box_noise_px: tuple[float, ...] = (0.5, 1.0, 2.0)
    calib: CameraCalib = KITTI_CALIB
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.depth_min < self.depth_max:
            raise ValueError(f"invalid depth range [{self.depth_min}, {self.depth_max}]")
        if not 1 <= self.num_objects_min <= self.num_objects_max:
            raise ValueError("invalid object count range")
        for name in ("occlusion_prob", "truncation_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        n_strata = len(self.strata_edges) + 1
        if len(self.depth_noise) != n_strata or len(self.box_noise_px) != n_strata:
            raise ValueError("need one depth/box noise level per stratum")
        if len(self.class_probs) != len(self.classes):
            raise ValueError("class_probs must match classes")
        unknown = set(self.classes) - set(DEFAULT_DIMS)
        if unknown:
            raise ValueError(f"no dimension prior for classes {sorted(unknown)}")

    @property
    def num_strata(self) -> int:
        return len(self.strata_edges) + 1

    def stratum(self, depth: float) -> int:
        return int(np.searchsorted(self.strata_edges, depth, side="right"))


@dataclass(frozen=True)
class SynthObject:
    box: Box3D
    truth: ObjectLabel
    annotated: ObjectLabel
    difficulty: DifficultyLevel
    stratum: int


@dataclass
class SynthScene:
    objects: list[SynthObject]
    calib: CameraCalib
    index: int = 0


@dataclass
class Dataset:
    scenes: list[SynthScene]
    classes: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scenes)

    def split(self, n_train: int) -> tuple["Dataset", "Dataset"]:
        return (
            Dataset(self.scenes[:n_train], self.classes, self.meta),
            Dataset(self.scenes[n_train:], self.classes, self.meta),
        )

    @property
    def num_objects(self) -> int:
        return sum(len(s.objects) for s in self.scenes)


def _r2(x: float) -> float:
    # labels are stored at two decimals; rounding up front makes files round-trip exactly
    v = round(float(x), 2)
    return 0.0 if v == 0 else v


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def _make_label(category, truncated, occluded, bbox, box: Box3D) -> ObjectLabel:
    bottom_y = box.y + box.h / 2.0
    alpha = _wrap_angle(box.yaw - math.atan2(box.x, box.z))
    return ObjectLabel(
        category=category,
        truncated=_r2(truncated),
        occluded=int(occluded),
        alpha=_r2(alpha),
        bbox2d=tuple(_r2(v) for v in bbox),
        dims=(_r2(box.h), _r2(box.w), _r2(box.l)),
        loc=(_r2(box.x), _r2(bottom_y), _r2(box.z)),
        rotation_y=_r2(box.yaw),
    )


def _sample_object(cfg: SceneConfig, rng: np.random.Generator) -> Optional[SynthObject]:
    cal = cfg.calib
    cls_idx = int(rng.choice(len(cfg.classes), p=np.asarray(cfg.class_probs) / np.sum(cfg.class_probs)))
    category = cfg.classes[cls_idx]
    mean, std = DEFAULT_DIMS[category]
    h, w, l = (max(m + s * rng.standard_normal(), 0.3) for m, s in zip(mean, std))
    z = rng.uniform(cfg.depth_min, cfg.depth_max)
    truncate = rng.random() < cfg.truncation_prob
    if truncate:
        # center close to (or beyond) a vertical image border
        u = rng.uniform(-0.03, 0.03) * cal.img_w
        if rng.random() < 0.5:
            u = cal.img_w - u
    else:
        u = rng.uniform(0.05, 0.95) * cal.img_w
    x = (u - cal.cx) * z / cal.fx
    occluded = int(rng.integers(1, 3)) if rng.random() < cfg.occlusion_prob else 0
    u_noise = rng.standard_normal(4)
    z_noise = rng.standard_normal()

    try:
        box = Box3D(_r2(x), _r2(CAMERA_HEIGHT - h / 2.0), _r2(z), _r2(h), _r2(w), _r2(l), 0.0)
        raw = enclosing_pixel_box(box, cal, clip=False)
        clipped = enclosing_pixel_box(box, cal, clip=True)
    except BehindCamera:
        return None
    raw_w = raw[2] - raw[0]
    vis_w = clipped[2] - clipped[0]
    if vis_w < 2.0 or clipped[3] - clipped[1] < 2.0:
        return None
    truncated = 1.0 - vis_w / raw_w
    # only deliberately truncated draws may leave the frame
    if truncated > 0.8 or (not truncate and truncated > 0):
        return None

    stratum = cfg.stratum(box.z)
    truth = _make_label(category, truncated, occluded, clipped, box)
    noisy_bbox = np.asarray(clipped) + cfg.box_noise_px[stratum] * u_noise
    noisy_bbox[[0, 2]] = np.clip(noisy_bbox[[0, 2]], 0.0, cal.img_w)
    noisy_bbox[[1, 3]] = np.clip(noisy_bbox[[1, 3]], 0.0, cal.img_h)
    if noisy_bbox[2] - noisy_bbox[0] < 1.0 or noisy_bbox[3] - noisy_bbox[1] < 1.0:
        return None
    noisy_z = max(box.z + cfg.depth_noise[stratum] * z_noise, 1.0)
    noisy_box = Box3D(box.x, box.y, noisy_z, box.h, box.w, box.l, box.yaw)
    annotated = _make_label(category, truncated, occluded, noisy_bbox, noisy_box)
    # both labels must describe a usable normalized box
    for lab in (truth, annotated):
        left, top, right, bottom = lab.bbox2d
        if (right - left) / cal.img_w <= 2 * EPS or (bottom - top) / cal.img_h <= 2 * EPS:
            return None
    return SynthObject(box, truth, annotated, assign_difficulty(truth), stratum)


def gen_scene(cfg: SceneConfig, rng: np.random.Generator, index: int = 0) -> SynthScene:
    """Sample one scene.

    Raises:
        EmptyScene: if no object could be placed in frame.
    """
    n = int(rng.integers(cfg.num_objects_min, cfg.num_objects_max + 1))
    objects = []
    for _ in range(n):
        for _attempt in range(MAX_ATTEMPTS):
            try:
                obj = _sample_object(cfg, rng)
            except DegenerateBox:
                obj = None
            if obj is not None:
                objects.append(obj)
                break
    if not objects:
        raise EmptyScene(f"no object landed in frame after {MAX_ATTEMPTS} attempts")
    return SynthScene(objects, cfg.calib, index)


def gen_scenes(n_scenes: int, cfg: SceneConfig, seed: Optional[int] = None, start: int = 0) -> list[SynthScene]:
    """``n_scenes`` scenes, each drawn from its own stream ``(seed, index)``."""
    seed = cfg.seed if seed is None else seed
    return [gen_scene(cfg, make_rng(seed, i), i) for i in range(start, start + n_scenes)]


def _manifest_text(meta: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in meta.items())


def _read_manifest(path: Path) -> dict:
    meta = {}
    if path.exists():
        for line in path.read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = (s.strip() for s in line.split("=", 1))
                meta[k] = v
    return meta


def write_dataset(root, scenes: Sequence[SynthScene], classes: Sequence[str], meta: Optional[dict] = None) -> None:
    root = Path(root)
    for sub in ("calib", "label_2", "truth_2"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for scene in scenes:
        name = f"{scene.index:06d}.txt"
        (root / "calib" / name).write_text(serialize_calib(scene.calib), newline="\n")
        write_label_file(root / "label_2" / name, [o.annotated for o in scene.objects])
        write_label_file(root / "truth_2" / name, [o.truth for o in scene.objects])
        for k, o in enumerate(scene.objects):
            rows.append([scene.index, k, o.stratum, o.difficulty.name])
    with open(root / "objects.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene", "object", "stratum", "difficulty"])
        w.writerows(rows)
    info = {"scenes": len(scenes), "objects": len(rows), "classes": ",".join(classes)}
    info.update(meta or {})
    (root / "manifest.txt").write_text(_manifest_text(info), newline="\n")


def gen_dataset(n_scenes: int, cfg: SceneConfig, root=None, seed: Optional[int] = None) -> Dataset:
    """Generate ``n_scenes`` scenes and, when ``root`` is given, write them in KITTI layout."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be at least 1")
    seed = cfg.seed if seed is None else seed
    scenes = gen_scenes(n_scenes, cfg, seed)
    meta = {
        "seed": seed,
        "img_w": repr(cfg.calib.img_w),
        "img_h": repr(cfg.calib.img_h),
        "strata_edges": ",".join(repr(e) for e in cfg.strata_edges),
    }
    if root is not None:
        write_dataset(root, scenes, cfg.classes, meta)
    return Dataset(scenes, tuple(cfg.classes), {**meta, "scenes": n_scenes})


def load_dataset(root) -> Dataset:
    """Read a directory written by :func:`write_dataset` back into memory."""
    root = Path(root)
    meta = _read_manifest(root / "manifest.txt")
    classes = tuple(meta.get("classes", "Car,Pedestrian,Cyclist").split(","))
    img_w = float(meta.get("img_w", KITTI_CALIB.img_w))
    img_h = float(meta.get("img_h", KITTI_CALIB.img_h))
    info: dict[tuple[int, int], tuple[int, str]] = {}
    if (root / "objects.csv").exists():
        with open(root / "objects.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                info[int(row["scene"]), int(row["object"])] = (int(row["stratum"]), row["difficulty"])
    scenes = []
    for path in sorted((root / "label_2").glob("*.txt")):
        idx = int(path.stem)
        cal = read_calib_file(root / "calib" / path.name, img_w, img_h)
        annotated = read_label_file(path)
        truth_path = root / "truth_2" / path.name
        truth = read_label_file(truth_path) if truth_path.exists() else annotated
        objects = []
        for k, (a, t) in enumerate(zip(annotated, truth)):
            if t.is_dontcare or t.category not in classes:
                continue
            stratum, level = info.get((idx, k), (0, assign_difficulty(t).name))
            objects.append(SynthObject(t.to_box3d(), t, a, DifficultyLevel[level], stratum))
        scenes.append(SynthScene(objects, cal, idx))
    return Dataset(scenes, classes, meta)


def scene_config_fields() -> list[str]:
    return [f.name for f in fields(SceneConfig)]
