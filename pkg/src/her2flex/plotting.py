"""Figure rendering for run reports. Every function writes one file and
closes its figure; nothing is shown interactively."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import Her2Grade  # noqa: E402

GRADE_COLORS = ("#4C72B0", "#55A868", "#DD8452", "#C44E52")

_RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
    "svg.hashsalt": "her2flex",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata so reruns produce identical files
    meta = {"Software": None} if path.suffix == ".png" else {}
    fig.savefig(path, metadata=meta)
    plt.close(fig)
    return path


def plot_confusion(cm, path, title: str = "") -> Path:
    cm = np.asarray(cm)
    labels = [g.label for g in Her2Grade][: cm.shape[0]]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        im = ax.imshow(cm, cmap="Blues")
        thresh = cm.max() / 2.0 if cm.max() else 0.5
        for i in range(cm.shape[0]):
            for j in range(cm.shape[1]):
                ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                        color="white" if cm[i, j] > thresh else "black")
        ax.set_xticks(range(len(labels)), labels)
        ax.set_yticks(range(len(labels)), labels)
        ax.set_xlabel("predicted grade")
        ax.set_ylabel("true grade")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        return _save(fig, path)


def plot_history(rows: Sequence[dict], keys: Sequence[str], path, title: str = "") -> Path:
    epochs = [r["epoch"] for r in rows]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for k in keys:
            vals = [r.get(k) for r in rows]
            if all(v is None for v in vals):
                continue
            ax.plot(epochs, vals, marker="o", ms=2.5, lw=1.2, label=k)
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_tsne(points, grades, path, title: str = "t-SNE of fused features") -> Path:
    pts = np.asarray(points)
    grades = np.asarray(grades, dtype=int)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.0, 3.6))
        for g in Her2Grade:
            m = grades == int(g)
            if m.any():
                ax.scatter(pts[m, 0], pts[m, 1], s=8, color=GRADE_COLORS[int(g)], label=g.label, alpha=0.8)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.legend(title="HER2", frameon=False, markerscale=2)
        ax.set_title(title)
        return _save(fig, path)


def plot_reconstructions(source, fake, real, path, n: int = 4,
                         titles=("source", "reconstructed", "real")) -> Path:
    n = min(n, len(source))
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(n, 3, figsize=(4.5, 1.5 * n), squeeze=False)
        for i in range(n):
            for j, img in enumerate((source[i], fake[i], real[i])):
                ax = axes[i, j]
                ax.imshow(np.clip(img, 0, 1))
                ax.set_xticks([])
                ax.set_yticks([])
                if i == 0:
                    ax.set_title(titles[j])
        return _save(fig, path)


def plot_arm_accuracies(acc: dict, path, corrupted: Optional[dict] = None) -> Path:
    names = list(acc)
    x = np.arange(len(names))
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(1.0 + 0.8 * len(names), 3.0))
        width = 0.38 if corrupted else 0.7
        ax.bar(x - (width / 2 if corrupted else 0), [acc[k] for k in names], width, label="clean")
        if corrupted:
            ax.bar(x + width / 2, [corrupted.get(k, np.nan) for k in names], width, label="corrupted")
            ax.legend(frameon=False)
        ax.set_xticks(x, names, rotation=30, ha="right")
        ax.set_ylabel("test accuracy")
        ax.set_ylim(0, 1)
        ax.grid(axis="y", alpha=0.3)
        return _save(fig, path)
