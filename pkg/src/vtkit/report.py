"""Report rendering: CSV tables and matplotlib figures.

Every figure is written with a fixed size, dpi, and metadata so that
re-running a command reproduces the output files byte for byte.
"""

from __future__ import annotations

import csv
import os
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_SAVEFIG = dict(dpi=100, metadata={"Software": "vtkit"})


def write_loss_csv(history: Sequence[Dict[str, float]], path) -> None:
    fields = ["epoch", "det", "track", "kd", "semcon"]
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for row in history:
            w.writerow({k: row.get(k, "") for k in fields})


def write_accuracy_csv(accuracy: Dict[str, object], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["category", "accuracy"])
        for c, v in sorted(accuracy["per_category"].items(), key=lambda kv: int(kv[0])):
            w.writerow([c, v])
        for group in ("old", "new", "all"):
            w.writerow([group, accuracy[group]])


def render_loss_curves(histories: Dict[str, Sequence[Dict[str, float]]], path) -> None:
    """One panel per training phase, one line per loss term."""
    fig, axes = plt.subplots(
        1, max(len(histories), 1), figsize=(5 * max(len(histories), 1), 3.5), squeeze=False
    )
    for ax, (title, history) in zip(axes[0], sorted(histories.items())):
        epochs = [row["epoch"] for row in history]
        for term in ("det", "track", "kd", "semcon"):
            values = [row.get(term, 0.0) for row in history]
            if any(v != 0.0 for v in values):
                ax.plot(epochs, values, label=term)
        ax.set_title(title)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def render_accuracy_bars(accuracies: Dict[str, Dict[str, object]], path) -> None:
    """Grouped OLD/NEW/ALL accuracy bars, one group per training stage."""
    groups = ["old", "new", "all"]
    stages = sorted(accuracies)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(stages), 1)
    for k, stage in enumerate(stages):
        vals = [accuracies[stage][g] for g in groups]
        ax.bar(
            [i + k * width for i in range(len(groups))], vals, width, label=stage
        )
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(groups))])
    ax.set_xticklabels([g.upper() for g in groups])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def write_ap_csv(per_category: Dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["category", "ap"])
        for c, v in sorted(per_category.items(), key=lambda kv: int(kv[0])):
            w.writerow([c, v])


def render_ap_bars(per_category: Dict, path, title: str = "Track AP") -> None:
    cats = sorted(per_category, key=int)
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(cats) + 2), 3.5))
    ax.bar(range(len(cats)), [per_category[c] for c in cats])
    ax.set_xticks(range(len(cats)))
    ax.set_xticklabels([str(c) for c in cats])
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("category")
    ax.set_ylabel("AP")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
