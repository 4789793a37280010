"""Matplotlib figures written next to the CSV outputs (headless Agg backend)."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_rounds(records, path, title: str = "") -> Path:
    """Average held-out loss per subject across global updates."""
    series = defaultdict(list)
    for r in records:
        if r.stage in ("pruned", "globally_updated"):
            series[r.subject].append((r.round, r.average))
    fig, ax = plt.subplots(figsize=(6, 4))
    for subject, pts in series.items():
        xs, ys = zip(*sorted(pts))
        style = dict(color="black", linewidth=2.5) if subject == "global" else dict(alpha=0.8)
        ax.plot(xs, ys, marker="o", markersize=3, label=subject if subject == "global" else f"client {subject}", **style)
    ax.set_xlabel("global update")
    ax.set_ylabel("held-out loss (domain mean)")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def plot_curve(values, path, ylabel: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(range(1, len(values) + 1), values, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    return _save(fig, path)


def plot_stage_table(rows, path, title: str = "") -> Path:
    """Grouped bars: one group per row label, one bar per stage.

    ``rows`` is a list of ``(label, {stage: loss})``.
    """
    stages = [s for s in ("pruned", "fine_tuned", "globally_updated") if any(s in v for _, v in rows)]
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(rows)), 4))
    width = 0.8 / max(1, len(stages))
    for j, s in enumerate(stages):
        xs = [i + j * width for i in range(len(rows))]
        ax.bar(xs, [v.get(s, float("nan")) for _, v in rows], width, label=s)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(rows))])
    ax.set_xticklabels([label for label, _ in rows], rotation=20, fontsize=8)
    ax.set_ylabel("held-out loss")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)
