"""Figure helpers for bench reports. Figures are written next to the CSV they plot."""

from __future__ import annotations

import math
from pathlib import Path

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
}


def new_figure(width: float = 4.5, height: float | None = None):
    if height is None:
        height = width * (math.sqrt(5) - 1) / 2
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path)
    plt.close(fig)
    return path


def plot_skewness(scores: np.ndarray, top_frac: float, path) -> Path:
    """Heatmap of cumulative top-fraction attention score, layers by heads."""
    fig, ax = new_figure(4.5, 3.2)
    with plt.rc_context(STYLE):
        im = ax.imshow(scores, vmin=0.0, vmax=1.0, cmap="viridis", aspect="auto",
                       interpolation="nearest")
        ax.set_xlabel("head")
        ax.set_ylabel("layer")
        ax.set_title(f"attention mass in top {top_frac:.0%} of keys")
        fig.colorbar(im, ax=ax)
    return save(fig, path)


def plot_complexity(rows: list[dict], path) -> Path:
    """Mean per-token comparisons against context length, one line per mode."""
    fig, ax = new_figure()
    with plt.rc_context(STYLE):
        for mode in sorted({r["mode"] for r in rows}):
            pts = sorted((r["L"], r["mean_comparisons"]) for r in rows if r["mode"] == mode)
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker="o", label=mode)
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.set_xlabel("context length L")
        ax.set_ylabel("comparisons per token")
        ax.legend(frameon=False)
    return save(fig, path)


def plot_recall(rows: list[dict], path) -> Path:
    fig, ax = new_figure()
    labels = [f"{r['layer']}/{r['head']}" for r in rows]
    x = np.arange(len(rows))
    with plt.rc_context(STYLE):
        ax.bar(x - 0.2, [r["mass_recall"] for r in rows], 0.4, label="centroid")
        ax.bar(x + 0.2, [r["ideal_mass_recall"] for r in rows], 0.4, label="ideal")
        ax.set_xticks(x, labels)
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("layer/head")
        ax.set_ylabel("attention-mass recall")
        ax.legend(frameon=False, loc="lower right")
    return save(fig, path)
