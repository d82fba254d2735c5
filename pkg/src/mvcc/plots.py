"""Figures written next to training logs and metric reports."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LABELS = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR*", "ROUGE_L", "CIDEr-D")

plt.rcParams.update(
    {
        "font.size": 9,
        "axes.labelsize": 9,
        "legend.fontsize": 8,
        "xtick.labelsize": 8,
        "ytick.labelsize": 8,
        "axes.spines.top": False,
        "axes.spines.right": False,
    }
)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps the bytes reproducible
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training(log, path) -> Path:
    """Loss and validation BLEU-4 per epoch, best epoch marked."""
    epochs = [r.epoch for r in log.records]
    fig, ax = plt.subplots(figsize=(4.5, 2.8))
    ax.plot(epochs, [r.loss for r in log.records], color="tab:blue", marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r.val_bleu4 for r in log.records], color="tab:red", marker="s", ms=3)
    ax2.set_ylabel("val BLEU-4", color="tab:red")
    ax2.spines["right"].set_visible(True)
    if log.best_epoch is not None:
        ax.axvline(log.best_epoch, color="0.6", ls="--", lw=0.8)
    return _save(fig, path)


def plot_report(report, path) -> Path:
    values = [getattr(report, c) for c in report.COLUMNS]
    fig, ax = plt.subplots(figsize=(5, 2.6))
    bars = ax.bar(LABELS, values, color="0.45")
    for b, v in zip(bars, values):
        ax.annotate(f"{v:.1f}", (b.get_x() + b.get_width() / 2, v), ha="center", va="bottom", fontsize=7)
    ax.set_ylabel("score (x100)")
    ax.set_title(f"n = {report.n_instances}", fontsize=8)
    return _save(fig, path)


def plot_ablation(scores: Mapping[str, Sequence[float]], path, metric: str = "BLEU-4") -> Path:
    """Per-seed scores for each mask setting, seeds joined by thin lines."""
    names = list(scores)
    fig, ax = plt.subplots(figsize=(4, 2.8))
    n_seeds = max(len(v) for v in scores.values())
    for s in range(n_seeds):
        ys = [scores[k][s] for k in names if s < len(scores[k])]
        ax.plot(range(len(ys)), ys, color="0.7", lw=0.8, marker="o", ms=4, mfc="k", mec="k")
    ax.set_xticks(range(len(names)), names)
    ax.set_ylabel(f"test {metric}")
    return _save(fig, path)
