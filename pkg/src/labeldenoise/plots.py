"""Figures written next to the CSV outputs (non-interactive backend)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .uncertainty import ATTRS  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curves(reports, path) -> Path:
    """Per-epoch sums of each logged loss component."""
    cols = ("recon_bbox", "recon_depth", "recon_class", "det", "recon")
    per = defaultdict(lambda: defaultdict(float))
    for r in reports:
        for c in cols:
            per[c][r.epoch] += getattr(r, c)
    fig, ax = plt.subplots(figsize=(6, 4))
    for c in cols:
        ep = sorted(per[c])
        ax.plot(ep, [per[c][e] for e in ep], label=c)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss (sum over batches)")
    ax.legend()
    return _save(fig, path)


def uncertainty_means(rows, path, title: str = "mean log scale") -> Path:
    """Grouped bars of mean log scale per level and attribute."""
    levels = list(dict.fromkeys(r.level for r in rows))
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / max(len(levels), 1)
    x = np.arange(len(ATTRS))
    for i, lvl in enumerate(levels):
        means = {r.attr: r.mean for r in rows if r.level == lvl}
        vals = [np.nan if means.get(a) is None else means[a] for a in ATTRS]
        ax.bar(x + i * width, vals, width, label=lvl)
    ax.set_xticks(x + width * (len(levels) - 1) / 2, ATTRS)
    ax.set_ylabel("log scale")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def depth_mae_bars(table, path) -> Path:
    labels = [f"{lo:g}-{hi:g}" for lo, hi in zip(table.edges[:-1], table.edges[1:])]
    vals = [np.nan if v is None else v for v in table.per_bin]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(labels, vals)
    ax.set_xlabel("true depth bin (m)")
    ax.set_ylabel("depth MAE (m)")
    return _save(fig, path)


def perturbation_scatter(clean: Sequence[float], perturbed: Sequence[float], path, label: str = "coordinate") -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(clean, perturbed, s=8)
    lo, hi = min(min(clean), min(perturbed)), max(max(clean), max(perturbed))
    ax.plot([lo, hi], [lo, hi], color="gray", lw=0.8)
    ax.set_xlabel(f"clean {label}")
    ax.set_ylabel(f"perturbed {label}")
    return _save(fig, path)
