"""Figures written next to the JSON-lines reports."""

from __future__ import annotations

import math

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
    "savefig.dpi": 120,
}


def _size(width=6.0, ratio=None):
    ratio = ratio or (math.sqrt(5) - 1) / 2
    return width, width * ratio


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_training_curves(records: list[dict], path):
    """Loss, accuracy and target RMSE per epoch."""
    epochs = [r["epoch"] for r in records]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=_size(9, 0.32))
        axes[0].plot(epochs, [r["train_loss"] for r in records], "o-", ms=3)
        axes[0].set(xlabel="epoch", ylabel="train loss")
        axes[1].plot(epochs, [r["train_acc"] for r in records], "o-", ms=3, label="train (mixed)")
        axes[1].plot(epochs, [r["test_acc"] for r in records], "s-", ms=3, label="test")
        axes[1].set(xlabel="epoch", ylabel="accuracy")
        axes[1].legend(frameon=False)
        axes[2].plot(epochs, [r["target_rmse"] for r in records], "o-", ms=3, color="C3")
        axes[2].set(xlabel="epoch", ylabel="RMSE aligned vs mixed target")
        _save(fig, path)


def plot_ratio_trajectories(trajectories, path):
    """One panel per sample: class-token mixing ratio across layers."""
    n = len(trajectories)
    cols = min(4, n)
    rows = math.ceil(n / cols)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(2.3 * cols, 2.0 * rows), squeeze=False)
        for ax, tr in zip(axes.flat, trajectories):
            layers = np.arange(len(tr.tl_align))
            ax.plot(layers, tr.cutmix, "--", color="0.5", label="CutMix")
            ax.plot(layers, tr.similarity, "s-", ms=3, color="C0", label="similarity")
            ax.plot(layers, tr.tl_align, "o-", ms=3, color="C3", label="TL-Align")
            ax.set_ylim(0, 1)
            ax.set_title(f"classes {tr.class_a}/{tr.class_b}, lam={tr.lam:.2f}")
            ax.set_xlabel("layer")
        for ax in list(axes.flat)[n:]:
            ax.axis("off")
        axes[0, 0].set_ylabel("mixing ratio")
        axes[0, 0].legend(frameon=False)
        _save(fig, path)


def plot_presence(per_layer: list[np.ndarray], grid: int, path):
    """Heatmaps of spatial-token presence under each layer's mean attention."""
    n = len(per_layer)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, n, figsize=(2.0 * n + 0.9, 2.2), squeeze=False,
                                 layout="constrained")
        vmax = max(float(p.max()) for p in per_layer)
        for l, (ax, p) in enumerate(zip(axes[0], per_layer)):
            im = ax.imshow(p.reshape(grid, grid), cmap="viridis", vmin=0, vmax=vmax)
            ax.set_title(f"layer {l + 1}")
            ax.set_xticks([])
            ax.set_yticks([])
        fig.colorbar(im, ax=list(axes[0]), shrink=0.8, label="presence")
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)


def plot_label_maps(y0: np.ndarray, y_final: np.ndarray, class_a: int, grid: int, path):
    """Class-a share of every patch label before and after alignment."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=_size(4.6, 0.5))
        for ax, y, title in ((axes[0], y0, "initial"), (axes[1], y_final, "aligned")):
            ax.imshow(y[1:, class_a].reshape(grid, grid), cmap="coolwarm", vmin=0, vmax=1)
            ax.set_title(title)
            ax.set_xticks([])
            ax.set_yticks([])
        _save(fig, path)
