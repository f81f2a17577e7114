"""Matplotlib figures written next to the JSON/CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

MARGIN = 0.05
_COLORS = ["tab:red", "tab:blue", "tab:green", "tab:orange", "tab:purple", "tab:brown"]


def scatter_limits(series: dict[str, list[tuple[float, float]]]) -> tuple[float, float]:
    top = max(max(g, p) for pairs in series.values() for g, p in pairs)
    top = top if top > 0 else 1.0
    return 0.0, top * (1 + MARGIN)


def plot_scatter(series: dict[str, list[tuple[float, float]]], path: str | Path, title: str | None = None):
    """Predicted vs groundtruth kcal per occasion, one colour per method.

    ``series`` maps a method name to ``(gt_total, pred_total)`` pairs. The
    dashed diagonal marks exact agreement. Returns the figure (already saved).
    """
    if not series or not any(series.values()):
        raise ValueError("plot_scatter needs at least one (gt, pred) pair")
    lo, hi = scatter_limits(series)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for k, (name, pairs) in enumerate(series.items()):
        gt = [g for g, _ in pairs]
        pred = [p for _, p in pairs]
        ax.scatter(gt, pred, s=18, color=_COLORS[k % len(_COLORS)], label=name, alpha=0.85)
    ax.plot([lo, hi], [lo, hi], "k--", lw=1, label="groundtruth")
    ax.set_xlim(lo, hi)
    ax.set_ylim(lo, hi)
    ax.set_aspect("equal")
    ax.set_xlabel("groundtruth energy (kcal)")
    ax.set_ylabel("estimated energy (kcal)")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper left", fontsize=8, frameon=False)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return fig


def plot_history(history: list[dict], keys: list[str], path: str | Path, title: str = ""):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    epochs = [row["epoch"] for row in history]
    for key in keys:
        if any(key in row for row in history):
            ax.plot(epochs, [row.get(key, float("nan")) for row in history], marker="o", ms=3, label=key)
    ax.set_xlabel("epoch")
    ax.set_title(title)
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return fig
