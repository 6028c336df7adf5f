"""Report figures rendered next to the delimited outputs.

matplotlib is imported lazily with the Agg backend so library users and
fast CLI paths never pay the import cost.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def save_training_curves(record, path) -> None:
    """Two-panel loss/accuracy figure for a training record."""
    plt = _plt()
    epochs = np.arange(1, record.stopped_epoch + 1)
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, record.train_loss, marker="o", label="train")
    ax_loss.plot(epochs, record.val_loss, marker="s", label="val")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_acc.plot(epochs, record.train_accuracy, marker="o", label="train")
    ax_acc.plot(epochs, record.val_accuracy, marker="s", label="val")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0.0, 1.05)
    ax_acc.legend()
    if record.best_epoch:
        ax_loss.axvline(record.best_epoch, color="gray", linestyle=":",
                        linewidth=1)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def save_confusion_matrix(cm, class_names, path) -> None:
    """Annotated heatmap of the confusion counts."""
    plt = _plt()
    counts = np.asarray(cm.counts)
    k = counts.shape[0]
    fig, ax = plt.subplots(figsize=(1.2 * k + 2.5, 1.2 * k + 2))
    im = ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(k), class_names, rotation=30, ha="right")
    ax.set_yticks(range(k), class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    cutoff = counts.max() / 2 if counts.max() else 0.5
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(counts[i, j]), ha="center", va="center",
                    color="white" if counts[i, j] > cutoff else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
