"""Figures written next to the CSV tables."""
from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io_utils import atomic_write  # noqa: E402

_META = {"Software": None}


def _save(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=110, metadata=_META)
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def plot_curve(series, grid_indices, path, kappa_position: int | None = None) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    pos = np.arange(len(series))
    ax.plot(pos, series, marker=".", lw=1)
    if kappa_position is not None:
        ax.axvline(kappa_position, color="C3", ls="--", label=f"kappa position {kappa_position}")
        ax.legend()
    ax.set_xlabel("sampling step (0 = noisiest)")
    ax.set_ylabel("mean |x_{n-1} - x_n|")
    ax.set_yscale("log")
    sec = ax.secondary_xaxis("top", functions=(lambda p: len(series) - p, lambda n: len(series) - n))
    sec.set_xlabel("grid index")
    fig.tight_layout()
    _save(fig, path)


def plot_buckets(stats, path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(7, 3))
    labels = [f"({b.lo:g}, {b.hi:g}]" for b in stats]
    axes[0].bar(labels, [b.mean_loss for b in stats], color="C0")
    axes[0].set_ylabel("mean loss")
    axes[1].bar(labels, [b.mean_grad_norm for b in stats], color="C1")
    axes[1].set_ylabel("mean grad norm")
    for ax in axes:
        ax.set_xlabel("alpha_bar bucket")
        ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    _save(fig, path)


def plot_weight_diff(report, path) -> None:
    groups = sorted({d.group for d in report.layers})
    fig, ax = plt.subplots(figsize=(6, 3.5))
    data = [[d.distance for d in report.layers if d.group == g] for g in groups]
    ax.boxplot(data)
    ax.set_xticks(range(1, len(groups) + 1), groups)
    ax.set_ylabel("normalized L1 distance")
    fig.tight_layout()
    _save(fig, path)


def plot_variants(scores: dict, path) -> None:
    """scores: variant -> per-seed combined scores (lower is better)."""
    names = list(scores)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, n in enumerate(names):
        v = np.asarray(scores[n])
        ax.scatter(np.full(v.size, i) + np.linspace(-0.15, 0.15, v.size), v, s=10, alpha=0.6)
        ax.hlines(v.mean(), i - 0.3, i + 0.3, color="k")
    ax.set_xticks(range(len(names)), names)
    ax.set_ylabel("combined score (lower is better)")
    fig.tight_layout()
    _save(fig, path)
