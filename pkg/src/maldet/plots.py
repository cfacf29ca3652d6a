"""Figure rendering for the report paths.

Every command that writes a delimited report (training history CSV,
metrics JSON, explanation JSON) can also render a PNG next to it. All
figures use the Agg backend so they work headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .explain import Explanation  # noqa: E402
from .training import EvalMetrics, TrainHistory  # noqa: E402


def save_history_figure(history: TrainHistory, path: str | Path) -> None:
    """Loss and train-accuracy curves over epochs."""
    epochs = [row["epoch"] for row in history.epochs]
    fig, ax_loss = plt.subplots(figsize=(7, 4))
    ax_loss.plot(epochs, [row["loss"] for row in history.epochs],
                 color="tab:red", marker="o", label="loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss", color="tab:red")
    ax_acc = ax_loss.twinx()
    ax_acc.plot(epochs, [row["train_acc"] for row in history.epochs],
                color="tab:blue", marker="s", label="train accuracy")
    ax_acc.set_ylabel("train accuracy", color="tab:blue")
    ax_acc.set_ylim(0.0, 1.05)
    ax_loss.set_title("Training curves")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_figure(metrics: EvalMetrics, path: str | Path) -> None:
    """Grouped per-class precision/recall/F1 bars with the accuracy line."""
    classes = ["benign", "malware"]
    names = ["p", "r", "f1"]
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.25
    for i, name in enumerate(names):
        values = [metrics.per_class[c][name] for c in classes]
        ax.bar([x + i * width for x in range(len(classes))], values, width,
               label={"p": "precision", "r": "recall", "f1": "F1"}[name])
    ax.axhline(metrics.accuracy, color="gray", linestyle="--",
               label=f"accuracy {metrics.accuracy:.4f}")
    ax.set_xticks([x + width for x in range(len(classes))])
    ax.set_xticklabels(classes)
    ax.set_ylim(0.0, 1.05)
    ax.set_title("Held-out metrics")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_weights_figure(expl: Explanation, path: str | Path, max_bars: int = 20) -> None:
    """Horizontal bars of the strongest signed contribution weights."""
    ranked = sorted(expl.ranked(), key=lambda t: -abs(t[2]))[:max_bars]
    ranked.sort(key=lambda t: t[2])
    labels = [f"{idx} {name}" for idx, name, _ in ranked]
    values = [w for _, _, w in ranked]
    colors = ["tab:green" if w > 0 else "tab:red" for w in values]
    fig, ax = plt.subplots(figsize=(7, max(2.5, 0.3 * len(ranked) + 1)))
    ax.barh(range(len(values)), values, color=colors)
    ax.set_yticks(range(len(values)))
    ax.set_yticklabels(labels, fontsize=8)
    ax.axvline(0.0, color="black", linewidth=0.8)
    ax.set_xlabel(f"weight toward predicted class ({expl.class_label})")
    ax.set_title("Per-call contributions")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
