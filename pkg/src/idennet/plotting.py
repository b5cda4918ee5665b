"""Matplotlib figures written next to the tab-separated reports."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# low response blue, high response red
HEATMAP_CMAP = "jet"

plt.rcParams.update({
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
})


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_history(epochs, path, title: str | None = None) -> Path:
    """Loss components and train accuracy per epoch."""
    ep = [e.epoch for e in epochs]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
    ax1.plot(ep, [e.total for e in epochs], label="total")
    ax1.plot(ep, [e.l_emo for e in epochs], "--", label="expression")
    if any(e.l_id for e in epochs):
        ax1.plot(ep, [e.l_id for e in epochs], ":", label="identity (focal)")
        ax1.set_yscale("log")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(frameon=False)
    ax2.plot(ep, [e.train_acc for e in epochs])
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("train accuracy")
    ax2.set_ylim(0, 1.02)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_confusion(report, path, class_names: Sequence[str] | None = None) -> Path:
    cm = report.confusion
    k = cm.shape[0]
    names = list(class_names) if class_names else [str(i) for i in range(k)]
    fig, ax = plt.subplots(figsize=(0.5 * k + 2, 0.5 * k + 1.5))
    rows = np.maximum(cm.sum(axis=1, keepdims=True), 1)
    ax.imshow(cm / rows, cmap="Blues", vmin=0, vmax=1)
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(int(cm[i, j])), ha="center", va="center", fontsize=7)
    ax.set_xticks(range(k), names)
    ax.set_yticks(range(k), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(f"accuracy {report.accuracy:.3f}")
    return _save(fig, path)


def plot_heatmaps(inputs: Sequence[np.ndarray], heatmaps: Sequence[np.ndarray], titles: Sequence[str],
                  path, max_columns: int = 8) -> Path:
    """Input crops (top row) over their heatmaps (bottom row), in column blocks."""
    n = len(inputs)
    cols = min(n, max_columns)
    blocks = -(-n // cols)
    fig, axes = plt.subplots(2 * blocks, cols, figsize=(1.4 * cols, 2.9 * blocks), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for k in range(n):
        r, c = 2 * (k // cols), k % cols
        axes[r, c].imshow(inputs[k], cmap="gray", vmin=0, vmax=255)
        axes[r, c].set_title(titles[k], fontsize=6)
        axes[r + 1, c].imshow(inputs[k], cmap="gray", vmin=0, vmax=255)
        axes[r + 1, c].imshow(heatmaps[k], cmap=HEATMAP_CMAP, vmin=0, vmax=1, alpha=0.55)
    return _save(fig, path)


def plot_ablation(accuracies: Mapping[str, Sequence[float]], path) -> Path:
    """Per-seed mean accuracy of each variant, with the across-seed mean marked."""
    names = list(accuracies)
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3))
    for k, name in enumerate(names):
        vals = np.asarray(accuracies[name])
        ax.scatter(np.full(len(vals), k), vals, s=14, color="0.4")
        ax.hlines(vals.mean(), k - 0.25, k + 0.25, color="C3")
    ax.set_xticks(range(len(names)), names)
    ax.set_ylabel("mean 10-fold accuracy")
    return _save(fig, path)
