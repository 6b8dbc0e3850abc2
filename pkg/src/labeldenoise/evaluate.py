"""Desk-scale evaluation: BEV IoU, AP over 40 recall points, depth MAE and
the log-scale-by-difficulty table.

Matching is greedy in score order; each ground truth is matched at most
once.  Ground truths marked Ignored take no part in matching and are not
counted.  When evaluating up to a difficulty level, ground truths of a
harder (but not Ignored) level are "don't care": a detection matched to one
is dropped rather than counted as a false positive.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dap import DepthMode
from .errors import DegenerateBox, ShapeMismatch
from .kitti_io import DifficultyLevel
from .rng import make_rng
from .synth import DEFAULT_DIMS
from .toymodel import (
    MlpParams,
    SceneRecords,
    TrainConfig,
    forward_batch,
    make_anchors,
    scores_for,
    stage1_log_sigma,
)
from .querygen import build_groups
from .uncertainty import ATTRS, RunningExtrema

RECALL_POINTS = np.arange(1, 41) / 40.0
LEVELS = (DifficultyLevel.Easy, DifficultyLevel.Moderate, DifficultyLevel.Hard)


@dataclass(frozen=True)
class Rect:
    """Axis-aligned ground-plane rectangle in meters (x lateral, z forward)."""

    x_min: float
    z_min: float
    x_max: float
    z_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.z_min < self.z_max):
            raise DegenerateBox(f"degenerate BEV rectangle {self}")

    @classmethod
    def around(cls, x: float, z: float, size_x: float, size_z: float) -> "Rect":
        return cls(x - size_x / 2, z - size_z / 2, x + size_x / 2, z + size_z / 2)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.z_max - self.z_min)


def bev_iou(a: Rect, b: Rect) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iz = min(a.z_max, b.z_max) - max(a.z_min, b.z_min)
    if ix <= 0 or iz <= 0:
        return 0.0
    inter = ix * iz
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class Detection:
    box_bev: Rect
    depth: float
    class_idx: int
    score: float
    frame: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    box_bev: Rect
    depth: float
    class_idx: int
    difficulty: DifficultyLevel
    frame: int = 0


def ap_r40(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_thresh: float = 0.5,
    max_level: DifficultyLevel = DifficultyLevel.Hard,
) -> Optional[float]:
    """AP sampled at 40 recall points with right-max precision interpolation.

    Inputs are assumed to be of one class.  Returns None when no ground
    truth is counted at ``max_level``.
    """
    valid = [g for g in gts if g.difficulty != DifficultyLevel.Ignored]
    counted = [g.difficulty <= max_level for g in valid]
    n_gt = sum(counted)
    if n_gt == 0:
        return None
    if not dets:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    used = [False] * len(valid)
    tp = []
    for i in order:
        d = dets[i]
        best, best_j = iou_thresh, -1
        for j, g in enumerate(valid):
            if used[j] or g.frame != d.frame:
                continue
            iou = bev_iou(d.box_bev, g.box_bev)
            if iou >= best:
                best, best_j = iou, j
        if best_j >= 0:
            used[best_j] = True
            if not counted[best_j]:
                continue
            tp.append(1.0)
        else:
            tp.append(0.0)
    if not tp:
        return 0.0
    tp = np.array(tp)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / n_gt
    # right-max: best precision at any recall >= r
    right_max = np.maximum.accumulate(precision[::-1])[::-1]
    sampled = np.zeros(len(RECALL_POINTS))
    for i, r in enumerate(RECALL_POINTS):
        idx = np.flatnonzero(recall >= r - 1e-12)
        if len(idx):
            sampled[i] = right_max[idx[0]]
    return float(sampled.mean())


@dataclass(frozen=True)
class MaeTable:
    edges: tuple
    per_bin: tuple  # MAE per bin, None for empty bins
    counts: tuple
    overall: Optional[float]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count", "mae"])
        for lo, hi, n, m in zip(self.edges[:-1], self.edges[1:], self.counts, self.per_bin):
            w.writerow([_num(lo), _num(hi), n, "" if m is None else _num(m)])
        w.writerow(["all", "all", sum(self.counts), "" if self.overall is None else _num(self.overall)])
        return buf.getvalue()


def _num(v) -> str:
    return repr(float(v))


def depth_mae(preds, gts, bins: Sequence[float]) -> MaeTable:
    """Mean absolute depth error per ground-truth depth bin ``[lo, hi)``; last bin closed."""
    preds = np.asarray(preds, dtype=np.float64).ravel()
    gts = np.asarray(gts, dtype=np.float64).ravel()
    if preds.shape != gts.shape:
        raise ShapeMismatch(f"{preds.shape} predictions vs {gts.shape} ground truths")
    edges = np.asarray(bins, dtype=np.float64)
    if len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bins must be at least two strictly increasing edges")
    err = np.abs(preds - gts)
    idx = np.clip(np.searchsorted(edges, gts, side="right") - 1, 0, len(edges) - 2)
    inside = (gts >= edges[0]) & (gts <= edges[-1])
    per, counts = [], []
    for b in range(len(edges) - 1):
        m = inside & (idx == b)
        counts.append(int(m.sum()))
        per.append(float(err[m].mean()) if m.any() else None)
    overall = float(err[inside].mean()) if inside.any() else None
    return MaeTable(tuple(float(e) for e in edges), tuple(per), tuple(counts), overall)


@dataclass(frozen=True)
class UncertaintyRow:
    level: str
    attr: str
    count: int
    mean: Optional[float]
    q25: Optional[float]
    median: Optional[float]
    q75: Optional[float]


UNCERTAINTY_COLUMNS = ("level", "attr", "count", "mean", "q25", "median", "q75")


def uncertainty_table(log_sigma: np.ndarray, groups: np.ndarray, names: Sequence[tuple]) -> list[UncertaintyRow]:
    """Per (group, attribute) summary of a (M, 5) log-scale matrix.

    ``names`` is a sequence of (group value, label) pairs; rows follow its order.
    """
    rows = []
    for value, label in names:
        sel = log_sigma[groups == value]
        for a, attr in enumerate(ATTRS):
            col = sel[:, a]
            if len(col):
                q = np.quantile(col, [0.25, 0.5, 0.75])
                rows.append(UncertaintyRow(label, attr, len(col), float(col.mean()), *map(float, q)))
            else:
                rows.append(UncertaintyRow(label, attr, 0, None, None, None, None))
    return rows


def uncertainty_by_difficulty(p: MlpParams, recs: Sequence[SceneRecords], by: str = "difficulty") -> list[UncertaintyRow]:
    """Log scales predicted on clean label queries, summarized per difficulty level or noise stratum."""
    ls = np.concatenate([stage1_log_sigma(r.clean, p) for r in recs])
    if by == "difficulty":
        groups = np.concatenate([r.levels for r in recs])
        names = [(int(l), l.name) for l in LEVELS]
    elif by == "stratum":
        groups = np.concatenate([r.strata for r in recs])
        names = [(s, f"stratum{s}") for s in range(int(groups.max()) + 1)]
    else:
        raise ValueError(f"unknown grouping {by!r}")
    return uncertainty_table(ls, groups, names)


def uncertainty_csv(rows: Sequence[UncertaintyRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(UNCERTAINTY_COLUMNS)
    for r in rows:
        w.writerow([r.level, r.attr, r.count, *("" if v is None else _num(v) for v in (r.mean, r.q25, r.median, r.q75))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# model-driven evaluation


def _bev_size(cls_name: str) -> tuple[float, float]:
    _, w, l = DEFAULT_DIMS[cls_name][0]
    return l, w


def detect_scene(
    p: MlpParams,
    rec: SceneRecords,
    cfg: TrainConfig,
    classes: Sequence[str],
    seed: int = 0,
):
    """Run anchor queries of one scene.

    Returns:
        (detections, anchor objects, predicted metric depth per anchor).
    """
    C = len(classes)
    anchors = make_anchors(rec, cfg, make_rng(seed, 3, rec.index), C)
    out = forward_batch(anchors.X, p)[0]
    logits = out.logits - out.logits.max(axis=1, keepdims=True)
    prob = np.exp(logits)
    prob /= prob.sum(axis=1, keepdims=True)
    cls = prob[:, :C].argmax(axis=1)
    score = prob[np.arange(len(cls)), cls]
    depth = out.depth + (anchors.d_geo if cfg.dap.depth_mode is DepthMode.Residual else 0.0)
    cal = rec.calib
    dets = []
    for i in range(len(cls)):
        z = float(depth[i])
        if not z > 0:
            continue
        u = 0.5 * (anchors.X[i, 0] - anchors.X[i, 2] + anchors.X[i, 0] + anchors.X[i, 4]) * cal.img_w
        x = (u - cal.cx) * z / cal.fx
        sx, sz = _bev_size(classes[cls[i]])
        dets.append(Detection(Rect.around(x, z, sx, sz), z, int(cls[i]), float(np.clip(score[i], 0, 1)), rec.index))
    return dets, anchors, depth


def ground_truths(rec: SceneRecords, scene_objects) -> list[GroundTruth]:
    out = []
    for k, o in enumerate(scene_objects):
        b = o.box
        lvl = DifficultyLevel(int(rec.levels[k]))
        out.append(GroundTruth(Rect.around(b.x, b.z, b.l, b.w), b.z, int(rec.classes[k]), lvl, rec.index))
    return out


def recon_depth_errors(
    p: MlpParams,
    recs: Sequence[SceneRecords],
    state: RunningExtrema,
    cfg: TrainConfig,
    seed: int = 0,
):
    """Metric depth error of reconstructed positive queries against true depth.

    Scores come from the frozen ``state``; perturbations use ``cfg.dap``.

    Returns:
        (abs errors, true depths, strata) over all positive queries.
    """
    errs, zs, strata = [], [], []
    for r in recs:
        if cfg.dap_enabled:
            scores = scores_for(r.clean, p, state)
        else:
            scores = np.full((len(r.clean), len(ATTRS)), cfg.uniform_score)
        gs = build_groups(r.clean, scores, cfg.dap, cfg.groups, make_rng(seed, 4, r.index))
        pos = np.flatnonzero(gs.positive)
        k = gs.gt_index[pos]
        d = forward_batch(gs.vecs[pos], p)[0].depth
        if cfg.dap.depth_mode is DepthMode.Residual:
            d = d + np.array([r.clean[i].d_geo for i in k])
        errs.append(np.abs(d - r.true_z[k]))
        zs.append(r.true_z[k])
        strata.append(r.strata[k])
    return np.concatenate(errs), np.concatenate(zs), np.concatenate(strata)


def detection_depths(p: MlpParams, recs: Sequence[SceneRecords], cfg: TrainConfig, classes, seed: int = 0):
    """Predicted depth of anchors matched to an object, with its true depth.

    Returns:
        (predicted depths, true depths, strata) over matched anchors.
    """
    preds, zs, strata = [], [], []
    for r in recs:
        _, anchors, depth = detect_scene(p, r, cfg, classes, seed)
        hit = anchors.matched >= 0
        k = anchors.matched[hit]
        preds.append(depth[hit])
        zs.append(r.true_z[k])
        strata.append(r.strata[k])
    return np.concatenate(preds), np.concatenate(zs), np.concatenate(strata)


@dataclass
class EvalReport:
    ap: dict = field(default_factory=dict)  # (class name, level name) -> AP or None
    depth: Optional[MaeTable] = None
    uncertainty: list = field(default_factory=list)
    uncertainty_strata: list = field(default_factory=list)

    def ap_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "difficulty", "ap_r40"])
        for (c, lvl), v in self.ap.items():
            w.writerow([c, lvl, "" if v is None else _num(v)])
        return buf.getvalue()

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "ap.csv": self.ap_csv(),
            "depth_mae.csv": self.depth.to_csv() if self.depth else "",
            "uncertainty_by_difficulty.csv": uncertainty_csv(self.uncertainty),
            "uncertainty_by_stratum.csv": uncertainty_csv(self.uncertainty_strata),
        }
        paths = []
        for name, text in files.items():
            (out / name).write_text(text, newline="\n")
            paths.append(out / name)
        return paths


def evaluate(
    p: MlpParams,
    recs: Sequence[SceneRecords],
    scenes,
    cfg: TrainConfig,
    classes: Sequence[str],
    depth_bins: Sequence[float],
    iou_thresh: float = 0.5,
    seed: int = 0,
) -> EvalReport:
    """Full report over scenes; ``scenes`` supplies the 3D boxes matching ``recs``."""
    dets, gts = [], []
    by_index = {s.index: s for s in scenes}
    for r in recs:
        d, _, _ = detect_scene(p, r, cfg, classes, seed)
        dets += d
        gts += ground_truths(r, by_index[r.index].objects)
    ap = {}
    for c, name in enumerate(classes):
        dc = [d for d in dets if d.class_idx == c]
        gc = [g for g in gts if g.class_idx == c]
        for lvl in LEVELS:
            ap[(name, lvl.name)] = ap_r40(dc, gc, iou_thresh, lvl)
    pred, z, _ = detection_depths(p, recs, cfg, classes, seed)
    mae = depth_mae(pred, z, depth_bins)
    return EvalReport(
        ap=ap,
        depth=mae,
        uncertainty=uncertainty_by_difficulty(p, recs, "difficulty"),
        uncertainty_strata=uncertainty_by_difficulty(p, recs, "stratum"),
    )
