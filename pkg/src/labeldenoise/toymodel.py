"""Per-query feed-forward denoiser with hand-written backpropagation.

Network: (7 + C) -> H -> H -> heads, tanh hidden activations.  The output
row is laid out as::

    [0:4]   box corner logits (l, t, r, b), squashed by a sigmoid
    [4:8]   box corner log scales
    [8]     depth value (times ``depth_scale``)
    [9]     depth log scale
    [10:]   C + 1 class logits, last one is no-object

Training follows the two-stage loop: stage 1 runs clean label queries
(read-only) to get log scales, which update the running certainty extrema
and yield difficulty scores; stage 2 builds perturbed query groups from
those scores and trains reconstruction on them together with a toy
detection loss on anchor queries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .dap import CleanLabel, DapConfig, DepthMode, clean_label_from_object, depth_label
from .errors import CheckpointMismatch, NonFinite, ShapeMismatch
from .geometry import CameraCalib, geometric_depth, pixel_to_corner_box
from .losses import LossReport, LossWeights, bbox_recon_loss, class_ce, depth_recon_loss, log_header
from .querygen import LabelQuery, PerturbGroupSet, build_groups, corner_array
from .rng import make_rng
from .synth import Dataset, SynthScene
from .uncertainty import ATTRS, RunningExtrema, certainty_columns, ema_update, score_matrix

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")
# 3D height assumed for anchors whose class is unknown
ANCHOR_HEIGHT = 1.6


def output_width(num_classes: int) -> int:
    return 11 + num_classes


@dataclass
class MlpParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    num_classes: int
    depth_scale: float = 1.0

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def input_width(self) -> int:
        return 7 + self.num_classes

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "MlpParams":
        out, i = {}, 0
        for n in PARAM_NAMES:
            a = getattr(self, n)
            out[n] = np.asarray(vec[i : i + a.size], dtype=np.float64).reshape(a.shape).copy()
            i += a.size
        if i != len(vec):
            raise ShapeMismatch(f"flat vector has {len(vec)} entries, expected {i}")
        return replace(self, **out)

    def copy(self) -> "MlpParams":
        return self.with_flat(self.flat())


def init_params(num_classes: int, hidden: int, seed: int, depth_scale: float = 1.0) -> MlpParams:
    rng = make_rng(seed, 0x1417)
    d_in, d_out = 7 + num_classes, output_width(num_classes)

    def layer(n_in, n_out, gain=1.0):
        return gain * rng.standard_normal((n_in, n_out)) / math.sqrt(n_in), np.zeros(n_out)

    W1, b1 = layer(d_in, hidden)
    W2, b2 = layer(hidden, hidden)
    W3, b3 = layer(hidden, d_out, gain=0.1)
    return MlpParams(W1, b1, W2, b2, W3, b3, num_classes, depth_scale)


def zero_params(num_classes: int, hidden: int, depth_scale: float = 1.0) -> MlpParams:
    p = init_params(num_classes, hidden, 0, depth_scale)
    return p.with_flat(np.zeros_like(p.flat()))


@dataclass
class HeadOutputs:
    box: np.ndarray
    box_log_sigma: np.ndarray
    depth: np.ndarray
    depth_log_sigma: np.ndarray
    logits: np.ndarray

    def log_sigma_attrs(self) -> np.ndarray:
        """(B, 5) log scales in ``ATTRS`` order (d, l, t, r, b)."""
        return np.concatenate([self.depth_log_sigma[:, None], self.box_log_sigma], axis=1)

    def row(self, i: int) -> "HeadOutputs":
        return HeadOutputs(*(a[i : i + 1] for a in (self.box, self.box_log_sigma, self.depth, self.depth_log_sigma, self.logits)))

    def flat(self) -> np.ndarray:
        return np.concatenate(
            [self.box.ravel(), self.box_log_sigma.ravel(), self.depth.ravel(), self.depth_log_sigma.ravel(), self.logits.ravel()]
        )


@dataclass
class _Cache:
    X: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    box: np.ndarray


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def forward_batch(X: np.ndarray, p: MlpParams) -> tuple[HeadOutputs, _Cache]:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != p.input_width:
        raise ShapeMismatch(f"query width {X.shape[1]} != {p.input_width}")
    Xs = X.copy()
    Xs[:, 6] /= p.depth_scale
    A1 = np.tanh(Xs @ p.W1 + p.b1)
    A2 = np.tanh(A1 @ p.W2 + p.b2)
    Z = A2 @ p.W3 + p.b3
    box = _sigmoid(Z[:, 0:4])
    out = HeadOutputs(
        box=box,
        box_log_sigma=Z[:, 4:8],
        depth=Z[:, 8] * p.depth_scale,
        depth_log_sigma=Z[:, 9],
        logits=Z[:, 10:],
    )
    return out, _Cache(Xs, A1, A2, box)


def forward(q, p: MlpParams) -> HeadOutputs:
    """Head outputs for one query (``LabelQuery`` or raw vector) or a stack of them."""
    vec = q.vec if isinstance(q, LabelQuery) else q
    return forward_batch(vec, p)[0]


@dataclass
class HeadGrads:
    """Loss gradients with respect to each head output (same shapes as ``HeadOutputs``)."""

    box: np.ndarray
    box_log_sigma: np.ndarray
    depth: np.ndarray
    depth_log_sigma: np.ndarray
    logits: np.ndarray

    @classmethod
    def zeros(cls, n: int, num_classes: int) -> "HeadGrads":
        return cls(np.zeros((n, 4)), np.zeros((n, 4)), np.zeros(n), np.zeros(n), np.zeros((n, num_classes + 1)))


def backward(cache: _Cache, p: MlpParams, g: HeadGrads) -> dict[str, np.ndarray]:
    """Parameter gradients given head-output gradients for the cached batch."""
    n = cache.X.shape[0]
    if g.box.shape != (n, 4) or g.logits.shape != (n, p.num_classes + 1):
        raise ShapeMismatch("head gradients do not match the cached batch")
    dZ = np.empty((n, output_width(p.num_classes)))
    dZ[:, 0:4] = g.box * cache.box * (1.0 - cache.box)
    dZ[:, 4:8] = g.box_log_sigma
    dZ[:, 8] = g.depth * p.depth_scale
    dZ[:, 9] = g.depth_log_sigma
    dZ[:, 10:] = g.logits
    grads = {"W3": cache.A2.T @ dZ, "b3": dZ.sum(axis=0)}
    dZ2 = (dZ @ p.W3.T) * (1.0 - cache.A2**2)
    grads["W2"] = cache.A1.T @ dZ2
    grads["b2"] = dZ2.sum(axis=0)
    dZ1 = (dZ2 @ p.W2.T) * (1.0 - cache.A1**2)
    grads["W1"] = cache.X.T @ dZ1
    grads["b1"] = dZ1.sum(axis=0)
    return grads


def flatten_grads(grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([grads[n].ravel() for n in PARAM_NAMES])


# ---------------------------------------------------------------------------
# training data


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 32
    lr: float = 0.05
    epochs: int = 200
    batch_size: int = 10
    seed: int = 0
    dap: DapConfig = field(default_factory=DapConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    beta: float = 0.8
    groups: int = 7
    distractors: int = 2
    anchor_jitter: float = 0.05
    match_radius: float = 0.05
    dap_enabled: bool = True
    uniform_score: float = 0.5
    depth_scale: float = 1.0
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.hidden < 1 or self.batch_size < 1 or self.groups < 1 or self.epochs < 0:
            raise ValueError("hidden, batch_size and groups must be positive; epochs nonnegative")
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be nonnegative, got {self.lr}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if not 0.0 <= self.uniform_score <= 1.0:
            raise ValueError("uniform_score must lie in [0, 1]")


@dataclass
class SceneRecords:
    """Per-scene arrays used by the trainer, derived once from a ``SynthScene``.

    Queries come from the noise-free labels; regression targets come from the
    annotated labels.
    """

    clean: list[CleanLabel]
    target_corners: np.ndarray
    target_depth: np.ndarray
    target_z: np.ndarray
    true_z: np.ndarray
    classes: np.ndarray
    strata: np.ndarray
    levels: np.ndarray
    calib: CameraCalib
    index: int


def scene_records(scene: SynthScene, classes: Sequence[str], mode: DepthMode) -> SceneRecords:
    clean, corners, tdepth, tz, z, cls, strata, levels = [], [], [], [], [], [], [], []
    for o in scene.objects:
        cl = clean_label_from_object(o.truth, scene.calib, classes, mode)
        clean.append(cl)
        corners.append(pixel_to_corner_box(o.annotated.bbox2d, scene.calib).as_tuple())
        tdepth.append(depth_label(o.annotated.loc[2], cl.d_geo, mode))
        tz.append(o.annotated.loc[2])
        z.append(o.truth.loc[2])
        cls.append(cl.class_idx)
        strata.append(o.stratum)
        levels.append(int(o.difficulty))
    return SceneRecords(
        clean,
        np.array(corners).reshape(-1, 4),
        np.array(tdepth),
        np.array(tz),
        np.array(z),
        np.array(cls, dtype=np.int64),
        np.array(strata, dtype=np.int64),
        np.array(levels, dtype=np.int64),
        scene.calib,
        scene.index,
    )


def dataset_records(ds: Dataset, mode: DepthMode) -> list[SceneRecords]:
    return [scene_records(s, ds.classes, mode) for s in ds.scenes if s.objects]


def clean_matrix(clean: Sequence[CleanLabel]) -> np.ndarray:
    C = clean[0].num_classes
    X = np.zeros((len(clean), 7 + C))
    for i, cl in enumerate(clean):
        X[i, :6] = cl.box.as_tuple()
        X[i, 6] = cl.depth
        X[i, 7 + cl.class_idx] = 1.0
    return X


@dataclass
class Anchors:
    """Anchor queries of one scene with their detection targets."""

    X: np.ndarray
    d_geo: np.ndarray
    matched: np.ndarray  # gt index per anchor, -1 when unmatched
    target_corners: np.ndarray
    target_depth: np.ndarray
    target_class: np.ndarray
    scene: int = 0


def make_anchors(rec: SceneRecords, cfg: TrainConfig, rng: np.random.Generator, num_classes: int) -> Anchors:
    """Jittered proposals around each object plus random distractor boxes.

    Anchor class slots carry a uniform 1/C prior; depth slots carry 0 in
    residual mode (no prior) and the geometric depth in absolute mode.
    Targets come from greedy nearest-center matching of objects to anchors.
    """
    cal = rec.calib
    true_corners = corner_array(np.array([c.box.as_tuple() for c in rec.clean]))
    K = len(true_corners)
    wh = np.stack([true_corners[:, 2] - true_corners[:, 0], true_corners[:, 3] - true_corners[:, 1]], axis=1)
    jitter = rng.uniform(-cfg.anchor_jitter, cfg.anchor_jitter, size=(K, 4)) * np.tile(wh, 2)
    prop = true_corners + jitter

    D = cfg.distractors
    centers = rng.uniform(0.05, 0.95, size=(D, 2))
    sizes = np.stack([rng.uniform(10, 300, D) / cal.img_w, rng.uniform(10, 150, D) / cal.img_h], axis=1)
    dist = np.concatenate([centers - sizes / 2, centers + sizes / 2], axis=1)

    corners = np.clip(np.concatenate([prop, dist]), 0.0, 1.0)
    min_w, min_h = 2.0 / cal.img_w, 2.0 / cal.img_h
    corners[:, 2] = np.maximum(corners[:, 2], np.minimum(corners[:, 0] + min_w, 1.0))
    corners[:, 0] = np.minimum(corners[:, 0], corners[:, 2] - min_w)
    corners[:, 3] = np.maximum(corners[:, 3], np.minimum(corners[:, 1] + min_h, 1.0))
    corners[:, 1] = np.minimum(corners[:, 1], corners[:, 3] - min_h)

    A = len(corners)
    px_h = (corners[:, 3] - corners[:, 1]) * cal.img_h
    d_geo = np.array([geometric_depth(ANCHOR_HEIGHT, h, cal.fy) for h in px_h])
    X = np.zeros((A, 7 + num_classes))
    xc, yc = 0.5 * (corners[:, 0] + corners[:, 2]), 0.5 * (corners[:, 1] + corners[:, 3])
    X[:, 0], X[:, 1] = xc, yc
    X[:, 2], X[:, 3] = xc - corners[:, 0], yc - corners[:, 1]
    X[:, 4], X[:, 5] = corners[:, 2] - xc, corners[:, 3] - yc
    X[:, 6] = 0.0 if cfg.dap.depth_mode is DepthMode.Residual else d_geo
    X[:, 7:] = 1.0 / num_classes

    matched = greedy_center_match(true_corners, corners, cfg.match_radius)
    tc = np.zeros((A, 4))
    td = np.zeros(A)
    tcls = np.full(A, num_classes, dtype=np.int64)
    hit = matched >= 0
    tc[hit] = rec.target_corners[matched[hit]]
    mode = cfg.dap.depth_mode
    td[hit] = [depth_label(z, g, mode) for z, g in zip(rec.target_z[matched[hit]], d_geo[hit])]
    tcls[hit] = rec.classes[matched[hit]]
    return Anchors(X, d_geo, matched, tc, td, tcls, rec.index)


def greedy_center_match(gt_corners: np.ndarray, anchor_corners: np.ndarray, radius: float) -> np.ndarray:
    """Assign each ground truth, in order, to its nearest free anchor center within ``radius``."""
    gc = np.stack([gt_corners[:, [0, 2]].mean(1), gt_corners[:, [1, 3]].mean(1)], axis=1)
    ac = np.stack([anchor_corners[:, [0, 2]].mean(1), anchor_corners[:, [1, 3]].mean(1)], axis=1)
    matched = np.full(len(ac), -1, dtype=np.int64)
    for k, c in enumerate(gc):
        dist = np.hypot(*(ac - c).T)
        dist[matched >= 0] = np.inf
        j = int(np.argmin(dist)) if len(dist) else -1
        if j >= 0 and dist[j] <= radius:
            matched[j] = k
    return matched


# ---------------------------------------------------------------------------
# two-stage loop


def stage1_log_sigma(clean: Sequence[CleanLabel], p: MlpParams) -> np.ndarray:
    """(K, 5) log scales predicted on clean label queries; never touches ``p``."""
    return forward_batch(clean_matrix(clean), p)[0].log_sigma_attrs()


def stage1_scores(
    clean: Sequence[CleanLabel],
    p: MlpParams,
    state: RunningExtrema,
    beta: float = 0.8,
) -> tuple[np.ndarray, RunningExtrema]:
    """Difficulty scores for clean labels and the extrema updated with this batch.

    Returns:
        ((K, 5) scores in ``ATTRS`` order, new state).
    """
    ls = stage1_log_sigma(clean, p)
    state = ema_update(state, certainty_columns(ls), beta)
    return score_matrix(ls, state), state


@dataclass
class StepResult:
    report: LossReport
    grads: dict[str, np.ndarray]
    state: RunningExtrema
    groups: PerturbGroupSet
    scores: np.ndarray


def batch_loss(
    recs: Sequence[SceneRecords],
    p: MlpParams,
    state: RunningExtrema,
    cfg: TrainConfig,
    rng: np.random.Generator,
    anchors: Optional[Sequence[Anchors]] = None,
) -> StepResult:
    """Stage 1 + stage 2 for one batch of scenes; returns losses and parameter gradients.

    The gradient is that of the reported total divided by the number of
    supervised queries in the batch.
    """
    C = p.num_classes
    clean = [c for r in recs for c in r.clean]
    t_corners = np.concatenate([r.target_corners for r in recs])
    t_depth = np.concatenate([r.target_depth for r in recs])
    t_cls = np.concatenate([r.classes for r in recs])

    scores, state = stage1_scores(clean, p, state, cfg.beta)
    if not cfg.dap_enabled:
        scores = np.full_like(scores, cfg.uniform_score)

    if anchors is None:
        anchors = [make_anchors(r, cfg, rng, C) for r in recs]
    XA = np.concatenate([a.X for a in anchors])
    gs = build_groups(clean, scores, cfg.dap, cfg.groups, rng, num_anchors=len(XA))
    X = np.concatenate([gs.vecs, XA])
    out, cache = forward_batch(X, p)
    nP = len(gs)
    w = cfg.weights

    g = HeadGrads.zeros(len(X), C)
    pos = np.flatnonzero(gs.positive)
    k = gs.gt_index[pos]
    recon_bbox, gb = bbox_recon_loss(t_corners[k], out.box[pos], out.box_log_sigma[pos])
    recon_depth, gd = depth_recon_loss(t_depth[k], out.depth[pos], out.depth_log_sigma[pos])
    cls_target = np.where(gs.positive, t_cls[gs.gt_index], C)
    recon_class, gc = class_ce(out.logits[:nP], cls_target)
    g.box[pos] += w.lambda_bbox * gb["pred"]
    g.box_log_sigma[pos] += w.lambda_bbox * gb["log_sigma"]
    g.depth[pos] += w.lambda_d * gd["pred"]
    g.depth_log_sigma[pos] += w.lambda_d * gd["log_sigma"]
    g.logits[:nP] += w.lambda_cls * gc

    a_cls = np.concatenate([a.target_class for a in anchors])
    a_corners = np.concatenate([a.target_corners for a in anchors])
    a_depth = np.concatenate([a.target_depth for a in anchors])
    hit = nP + np.flatnonzero(a_cls < C)
    det, ga = class_ce(out.logits[nP:], a_cls)
    g.logits[nP:] += ga
    if len(hit):
        v, gb = bbox_recon_loss(a_corners[hit - nP], out.box[hit], out.box_log_sigma[hit])
        det += v
        g.box[hit] += gb["pred"]
        g.box_log_sigma[hit] += gb["log_sigma"]
        v, gd = depth_recon_loss(a_depth[hit - nP], out.depth[hit], out.depth_log_sigma[hit])
        det += v
        g.depth[hit] += gd["pred"]
        g.depth_log_sigma[hit] += gd["log_sigma"]

    scale = 1.0 / len(X)
    for a in (g.box, g.box_log_sigma, g.depth, g.depth_log_sigma, g.logits):
        a *= scale
    grads = backward(cache, p, g)
    report = LossReport(recon_bbox, recon_depth, recon_class, det, w)
    return StepResult(report, grads, state, gs, scores)


def sgd_step(p: MlpParams, grads: dict[str, np.ndarray], lr: float, clip: float) -> MlpParams:
    flat = flatten_grads(grads)
    norm = float(np.linalg.norm(flat))
    if clip > 0 and norm > clip:
        flat = flat * (clip / norm)
    return p.with_flat(p.flat() - lr * flat)


def batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def train_epoch(
    recs: Sequence[SceneRecords],
    p: MlpParams,
    state: RunningExtrema,
    cfg: TrainConfig,
    epoch: int,
) -> tuple[MlpParams, RunningExtrema, list[LossReport]]:
    """One pass over ``recs`` in seeded random batches with plain gradient descent."""
    if not recs:
        raise ValueError("empty training set")
    reports = []
    order_rng = make_rng(cfg.seed, 1, epoch)
    for step, idx in enumerate(batches(len(recs), cfg.batch_size, order_rng)):
        rng = make_rng(cfg.seed, 2, epoch, step)
        res = batch_loss([recs[i] for i in idx], p, state, cfg, rng)
        rep = res.report
        if not math.isfinite(rep.total):
            raise NonFinite(f"non-finite loss at epoch {epoch}, step {step}")
        rep.epoch, rep.step = epoch, step
        reports.append(rep)
        state = res.state
        p = sgd_step(p, res.grads, cfg.lr, cfg.grad_clip)
    return p, state, reports


@dataclass
class TrainResult:
    params: MlpParams
    state: RunningExtrema
    reports: list[LossReport]

    def epoch_totals(self, attr: str = "recon") -> np.ndarray:
        n = max((r.epoch for r in self.reports), default=-1) + 1
        out = np.zeros(n)
        for r in self.reports:
            out[r.epoch] += getattr(r, attr)
        return out

    def log_csv(self) -> str:
        return log_header() + "".join(r.csv_line() for r in self.reports)


def train(
    recs: Sequence[SceneRecords],
    num_classes: int,
    cfg: TrainConfig,
    params: Optional[MlpParams] = None,
    state: Optional[RunningExtrema] = None,
    on_epoch=None,
) -> TrainResult:
    p = params if params is not None else init_params(num_classes, cfg.hidden, cfg.seed, cfg.depth_scale)
    state = state if state is not None else RunningExtrema()
    reports: list[LossReport] = []
    for epoch in range(cfg.epochs):
        p, state, reps = train_epoch(recs, p, state, cfg, epoch)
        reports.extend(reps)
        if on_epoch is not None:
            on_epoch(epoch, reps)
    return TrainResult(p, state, reports)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, p: MlpParams, state: RunningExtrema, meta: dict) -> None:
    head = {
        "num_classes": p.num_classes,
        "hidden": p.hidden,
        "depth_scale": repr(p.depth_scale),
        **meta,
    }
    lines = ["# labeldenoise checkpoint\n"]
    lines += [f"{k} = {v}\n" for k, v in head.items()]
    lines.append("[params]\n")
    lines += [repr(float(v)) + "\n" for v in p.flat()]
    lines.append("[extrema]\n")
    lines.append(state.to_text())
    Path(path).write_text("".join(lines), newline="\n")


def load_checkpoint(path) -> tuple[MlpParams, RunningExtrema, dict]:
    text = Path(path).read_text()
    try:
        head, rest = text.split("[params]\n", 1)
        body, extrema = rest.split("[extrema]\n", 1)
    except ValueError:
        raise CheckpointMismatch(f"{path} is not a checkpoint file") from None
    meta = {}
    for line in head.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, v = (s.strip() for s in line.split("=", 1))
            meta[k] = v
    C, H = int(meta["num_classes"]), int(meta["hidden"])
    p = zero_params(C, H, float(meta.get("depth_scale", 1.0)))
    flat = np.array([float(x) for x in body.split()])
    return p.with_flat(flat), RunningExtrema.from_text(extrema), meta


def scores_for(clean: Sequence[CleanLabel], p: MlpParams, state: RunningExtrema) -> np.ndarray:
    """Scores against a frozen state (no extrema update), e.g. at evaluation time."""
    return score_matrix(stage1_log_sigma(clean, p), state)


def iter_objects(recs: Iterable[SceneRecords]):
    for r in recs:
        for k in range(len(r.clean)):
            yield r, k


__all__ = [
    "ATTRS",
    "MlpParams",
    "HeadOutputs",
    "HeadGrads",
    "TrainConfig",
    "init_params",
    "zero_params",
    "forward",
    "forward_batch",
    "backward",
    "stage1_scores",
    "train_epoch",
    "train",
]
