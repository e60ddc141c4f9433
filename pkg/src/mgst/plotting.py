"""Figures written next to the CSV outputs of ``train``, ``eval`` and ``ablate``."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.spines.right": False,
    "axes.spines.top": False,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def learning_curve(history, path, title: str = "") -> Path:
    """Loss (left axis) and train/val accuracy (right axis) per epoch."""
    epochs = [m.epoch for m in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.plot(epochs, [m.train_loss for m in history], color="0.3", marker="o", ms=3, label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("cross-entropy")
        acc = ax.twinx()
        acc.spines["right"].set_visible(True)
        acc.plot(epochs, [m.train_acc for m in history], color="C0", ls="--", label="train acc")
        acc.plot(epochs, [m.val_acc for m in history], color="C1", label="val acc")
        acc.set_ylim(0, 1.02)
        acc.set_ylabel("accuracy")
        lines = ax.get_lines() + acc.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="center right")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def confusion(cm: np.ndarray, path, labels: Sequence[str] | None = None) -> Path:
    k = cm.shape[0]
    labels = list(labels) if labels is not None else [str(i) for i in range(k)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(0.45 * k + 1.8, 0.45 * k + 1.4))
        ax.imshow(cm, cmap="Greys")
        thresh = cm.max() / 2 if cm.size else 0
        for (i, j), v in np.ndenumerate(cm):
            ax.text(j, i, str(v), ha="center", va="center", fontsize=7, color="white" if v > thresh else "black")
        ax.set_xticks(range(k), labels, rotation=45, ha="right")
        ax.set_yticks(range(k), labels)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        return _save(fig, path)


def ablation_bars(scores: Mapping[str, Mapping[str, Sequence[float]]], path, chance: Mapping[str, float] | None = None
                  ) -> Path:
    """Grouped bars: one group per metric, one bar per mode; height is the median over seeds, ticks mark seeds."""
    modes = list(scores)
    metrics = list(next(iter(scores.values())))
    width = 0.8 / max(len(modes), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.6 * len(metrics) + 2.0, 3.2))
        x = np.arange(len(metrics))
        for i, mode in enumerate(modes):
            pos = x + (i - (len(modes) - 1) / 2) * width
            vals = [scores[mode][m] for m in metrics]
            ax.bar(pos, [np.median(v) for v in vals], width, label=mode, color=f"C{i}")
            for p, v in zip(pos, vals):
                ax.plot([p] * len(v), v, "k_", ms=6)
        if chance:
            for j, m in enumerate(metrics):
                if m in chance:
                    ax.hlines(chance[m], j - 0.45, j + 0.45, colors="0.5", linestyles=":")
        ax.set_xticks(x, metrics)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("accuracy")
        ax.legend(loc="lower right", fontsize=7)
        return _save(fig, path)
