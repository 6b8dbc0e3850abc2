"""Reconstruction losses with analytic gradients.

Regression terms use the Laplacian aleatoric form

    sqrt(2) * exp(-log_sigma) * |gt - pred| + log_sigma

summed (not averaged) over instances.  Classification uses softmax
cross-entropy over C object classes plus one no-object class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatch, NonFinite

SQRT2 = math.sqrt(2.0)
LOG_COLUMNS = ("epoch", "step", "recon_bbox", "recon_depth", "recon_class", "det", "recon", "total")


def _arrays(*xs):
    out = [np.asarray(x, dtype=np.float64) for x in xs]
    for a in out:
        if not np.all(np.isfinite(a)):
            raise NonFinite("loss inputs must be finite")
    return out


def laplacian_term(pred, gt, log_sigma):
    """Elementwise Laplacian NLL term and its partial derivatives.

    Returns:
        (value, d value / d pred, d value / d log_sigma), each shaped like the
        broadcast inputs.  The derivative in ``pred`` is 0 at zero residual.
    """
    pred, gt, log_sigma = _arrays(pred, gt, log_sigma)
    resid = gt - pred
    inv = SQRT2 * np.exp(-log_sigma)
    value = inv * np.abs(resid) + log_sigma
    d_pred = -inv * np.sign(resid)
    d_log_sigma = 1.0 - inv * np.abs(resid)
    if value.ndim == 0:
        return float(value), float(d_pred), float(d_log_sigma)
    return value, d_pred, d_log_sigma


def depth_recon_loss(d_gt, d_recon, log_sigma):
    """Summed depth term over a batch.

    Returns:
        (value, {"pred": d/d d_recon, "log_sigma": d/d log_sigma}).
    """
    d_gt, d_recon, log_sigma = (np.atleast_1d(a) for a in _arrays(d_gt, d_recon, log_sigma))
    if d_gt.size == 0:
        raise EmptyBatch("depth loss needs at least one instance")
    value, g_pred, g_ls = laplacian_term(d_recon, d_gt, log_sigma)
    return float(np.sum(value)), {"pred": g_pred, "log_sigma": g_ls}


def bbox_recon_loss(gt_corners, recon_corners, log_sigma):
    """Summed corner term over a batch of (K, 4) corner boxes in (l, t, r, b) order.

    ``log_sigma`` is (K, 4) in the same order: x-coordinates pair with the
    l/r scales and y-coordinates with t/b.
    """
    gt, rec, ls = (np.atleast_2d(a) for a in _arrays(gt_corners, recon_corners, log_sigma))
    if gt.shape[0] == 0:
        raise EmptyBatch("box loss needs at least one instance")
    if not gt.shape == rec.shape == ls.shape or gt.shape[1] != 4:
        raise ValueError(f"expected matching (K, 4) arrays, got {gt.shape}, {rec.shape}, {ls.shape}")
    value, g_pred, g_ls = laplacian_term(rec, gt, ls)
    return float(np.sum(value)), {"pred": g_pred, "log_sigma": g_ls}


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def class_ce(logits, target):
    """Softmax cross-entropy; batched when ``logits`` is 2-D.

    Returns:
        (summed value, gradient w.r.t. logits = softmax - onehot).
    """
    (logits,) = _arrays(logits)
    single = logits.ndim == 1
    logits = np.atleast_2d(logits)
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if logits.shape[0] == 0:
        raise EmptyBatch("cross-entropy needs at least one instance")
    if np.any(target < 0) or np.any(target >= logits.shape[1]):
        raise ValueError(f"targets outside [0, {logits.shape[1]})")
    logp = log_softmax(logits)
    rows = np.arange(len(target))
    value = -float(np.sum(logp[rows, target]))
    grad = np.exp(logp)
    grad[rows, target] -= 1.0
    return value, (grad[0] if single else grad)


@dataclass(frozen=True)
class LossWeights:
    lambda_bbox: float = 1.0
    lambda_d: float = 1.0
    lambda_cls: float = 1.0

    def __post_init__(self):
        if min(self.lambda_bbox, self.lambda_d, self.lambda_cls) < 0:
            raise ValueError(f"loss weights must be nonnegative: {self}")


def total_recon(parts, w: LossWeights = LossWeights()) -> float:
    """Weighted sum of (bbox, depth, class) reconstruction losses."""
    bbox, depth, cls = parts
    return w.lambda_bbox * bbox + w.lambda_d * depth + w.lambda_cls * cls


def total_loss(recon: float, det: float) -> float:
    return recon + det


@dataclass
class LossReport:
    recon_bbox: float
    recon_depth: float
    recon_class: float
    det: float
    weights: LossWeights = field(default_factory=LossWeights)
    grad: np.ndarray | None = field(default=None, repr=False)
    epoch: int = 0
    step: int = 0

    @property
    def recon(self) -> float:
        return total_recon((self.recon_bbox, self.recon_depth, self.recon_class), self.weights)

    @property
    def total(self) -> float:
        return total_loss(self.recon, self.det)

    def row(self) -> list:
        return [self.epoch, self.step, self.recon_bbox, self.recon_depth, self.recon_class, self.det, self.recon, self.total]

    def csv_line(self) -> str:
        return ",".join(str(v) if isinstance(v, int) else repr(float(v)) for v in self.row()) + "\n"


def log_header() -> str:
    return ",".join(LOG_COLUMNS) + "\n"
