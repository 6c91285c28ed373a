"""Matplotlib rendering for the report paths.

Every function takes already-computed report data and writes one PNG next
to the delimited output. Rendering is deterministic: fixed style, fixed
figure geometry, pinned file metadata.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = dict(dpi=110, metadata={"Software": "gridcaps"})

plt.rcParams.update(
    {
        "figure.autolayout": True,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "font.size": 9,
    }
)

ACTUAL_COLOR = "#c23b22"  # ground truth
PREDICTED_COLOR = "#2b6ca3"


def save_training_curves(report, path):
    """Loss and accuracy per epoch from a training report."""
    epochs = np.arange(1, report.epochs_ran() + 1)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(epochs, report.train_loss, color=PREDICTED_COLOR)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("training loss")
    ax2.plot(epochs, report.train_acc, label="train", color=PREDICTED_COLOR)
    ax2.plot(epochs, report.val_acc, label="validation", color=ACTUAL_COLOR)
    if report.best_epoch >= 0:
        ax2.axvline(report.best_epoch + 1, ls="--", lw=0.8, color="gray")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("accuracy [%]")
    ax2.legend(loc="lower right")
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def save_distribution_figure(buckets, path, max_cells: int = 16):
    """Per-cell vehicle counts over time: actual vs predicted bars.

    One panel per cell, up to the `max_cells` busiest cells by actual count.
    """
    if not buckets:
        raise ValueError("no buckets to plot")
    actual = np.stack([b.actual.counts for b in buckets])  # [T, G]
    predicted = np.stack([b.predicted.counts for b in buckets])
    g = actual.shape[1]
    order = np.argsort(-actual.sum(axis=0), kind="stable")[: min(max_cells, g)]
    order = np.sort(order)
    ncols = int(np.ceil(np.sqrt(len(order))))
    nrows = int(np.ceil(len(order) / ncols))
    t = np.arange(len(buckets))
    fig, axes = plt.subplots(
        nrows, ncols, figsize=(2.6 * ncols, 2.0 * nrows), squeeze=False, sharex=True
    )
    top = max(1, int(max(actual.max(), predicted.max())))
    for panel, cell in enumerate(order):
        ax = axes[panel // ncols][panel % ncols]
        ax.bar(t - 0.2, actual[:, cell], width=0.4, color=ACTUAL_COLOR, label="actual")
        ax.bar(t + 0.2, predicted[:, cell], width=0.4, color=PREDICTED_COLOR, label="predicted")
        ax.set_title(f"cell {cell + 1}", fontsize=8)
        ax.set_ylim(0, top * 1.1)
    for panel in range(len(order), nrows * ncols):
        axes[panel // ncols][panel % ncols].set_visible(False)
    handles, labels = axes[0][0].get_legend_handles_labels()
    fig.legend(handles, labels, loc="upper right", ncol=2)
    fig.supxlabel("time bucket")
    fig.supylabel("vehicles")
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def save_error_ratio_figure(report, path):
    """Per-cell prediction error ratio; cells without ground truth are marked."""
    g = len(report.ratios)
    cells = np.arange(1, g + 1)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * g), 3.0))
    vals = np.where(report.defined, report.ratios, 0.0)
    colors = [PREDICTED_COLOR if d else "#bbbbbb" for d in report.defined]
    ax.bar(cells, vals, color=colors)
    for c, d in zip(cells, report.defined):
        if not d:
            ax.text(c, 0.0, "n/a", ha="center", va="bottom", fontsize=7, color="#666666")
    ax.set_xlabel("cell")
    ax.set_ylabel("error ratio")
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def save_accuracy_figure(rows, path):
    """Horizontal accuracy bars: rows of (label, percent)."""
    if not rows:
        raise ValueError("no accuracy rows to plot")
    labels = [r[0] for r in rows]
    values = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(5.0, 0.5 * len(rows) + 1.2))
    pos = np.arange(len(rows))
    ax.barh(pos, values, color=PREDICTED_COLOR)
    ax.set_yticks(pos, labels)
    ax.invert_yaxis()
    ax.set_xlabel("accuracy [%]")
    ax.set_xlim(0, 100)
    for p, v in zip(pos, values):
        ax.text(min(v + 1, 96), p, f"{v:.2f}", va="center", fontsize=8)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path
