"""Figures for the report commands. Always rendered off-screen to files."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    # fixed metadata keeps repeated renders byte-stable
    "svg.hashsalt": "sibrar",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_training_curves(train_loss: Sequence[float], val_ndcg: Sequence[float], path, best_epoch: Optional[int] = None):
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 2.6))
        epochs = np.arange(1, len(train_loss) + 1)
        ax1.plot(epochs, train_loss, marker="o", ms=3)
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("train loss")
        ax2.plot(epochs, val_ndcg, marker="o", ms=3, color="C1")
        if best_epoch:
            ax2.axvline(best_epoch, ls="--", color="grey", lw=0.8)
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("validation nDCG@10")
        return _save(fig, path)


def plot_sweep(rows, modalities: Sequence[str], path, reference: Optional[dict] = None):
    """Bar chart of nDCG per modality subset with a used-modality grid below.

    ``rows`` are ``(subset, ndcg)`` pairs; ``reference`` maps a label to an
    nDCG drawn as a dashed horizontal line.
    """
    rows = list(rows)
    n = len(rows)
    with plt.rc_context(STYLE):
        fig, (ax, grid) = plt.subplots(
            2, 1, figsize=(max(4.0, 0.35 * n + 1.5), 3.2 + 0.25 * len(modalities)),
            sharex=True, gridspec_kw={"height_ratios": [3, 0.35 * len(modalities)]},
        )
        x = np.arange(n)
        vals = [v for _, v in rows]
        ax.bar(x, vals, color="C0")
        for xi, v in zip(x, vals):
            ax.text(xi, v, f"{v:.3f}", ha="center", va="bottom", fontsize=6, rotation=90)
        for label, v in (reference or {}).items():
            ax.axhline(v, ls="--", color="grey", lw=0.8)
            ax.text(n - 0.5, v, label, ha="right", va="bottom", fontsize=7, color="grey")
        ax.set_ylabel("nDCG@10")
        mask = np.array([[m in subset for subset, _ in rows] for m in modalities], dtype=float)
        colors = np.zeros(mask.shape + (4,))
        for i in range(len(modalities)):
            colors[i, mask[i] > 0] = matplotlib.colormaps["tab10"](i % 10)
            colors[i, mask[i] == 0] = (1, 1, 1, 1)
        grid.imshow(colors, aspect="auto", interpolation="nearest")
        grid.set_yticks(range(len(modalities)), modalities)
        grid.set_xticks(x, [str(len(s)) for s, _ in rows])
        grid.set_xlabel("number of modalities")
        return _save(fig, path)


def plot_gap(pre, post, path):
    """First two principal components before and after the branch."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7, 3.2))
        for ax, rep, title in ((axes[0], pre, "branch input"), (axes[1], post, "branch output")):
            mods = [m for _, m in rep.labels]
            for i, m in enumerate(rep.modalities):
                sel = np.array([x == m for x in mods])
                ax.scatter(rep.projections[sel, 0], rep.projections[sel, 1], s=4, alpha=0.6, label=m, color=f"C{i}")
            ax.set_title(title)
            ax.set_xlabel("PC1")
            ax.set_ylabel("PC2")
        axes[1].legend(markerscale=3, frameon=False)
        return _save(fig, path)
