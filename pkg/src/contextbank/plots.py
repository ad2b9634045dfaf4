"""PNG figures for the report and bench commands.

Figures are drawn with the Agg backend and saved without a Software/date
stamp so the same data always gives the same bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def attention_timeline_plot(edges_hours: Sequence[float], counts: Sequence[int], path, title: str = "") -> Path:
    """Bar chart of thresholded attention counts per time-offset bin (hours)."""
    edges = np.asarray(edges_hours, dtype=np.float64)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.0))
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", color="#4c72b0", edgecolor="none")
        ax.set_xlabel("time from keyframe (hours)")
        ax.set_ylabel("attention count")
        span = max(abs(edges[0]), abs(edges[-1]))
        if span >= 48:
            step = 24 if span <= 24 * 8 else 24 * 7
            ax.set_xticks(np.arange(-np.floor(span / step) * step, span + 1e-9, step))
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def fp_histogram_plot(edges: Sequence[float], series: Mapping[str, Sequence[int]], path, title: str = "") -> Path:
    """Grouped bars of false-positive counts per confidence bin, one group member per series."""
    edges = np.asarray(edges, dtype=np.float64)
    names = list(series)
    width = np.diff(edges) / max(len(names), 1)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.0))
        for i, name in enumerate(names):
            ax.bar(edges[:-1] + i * width, series[name], width=width, align="edge", label=name)
        ax.set_xlabel("confidence")
        ax.set_ylabel("false positives")
        ax.set_yscale("symlog", linthresh=1.0)
        if len(names) > 1:
            ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def score_bar_plot(labels: Sequence[str], values: Sequence[float], path, ylabel: str = "mAP@0.5",
                   title: str = "") -> Path:
    """One bar per configuration, value printed above each bar."""
    x = np.arange(len(labels))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.8 * len(labels) + 1.5), 3.2))
        bars = ax.bar(x, values, color="#55a868")
        for b, v in zip(bars, values):
            ax.text(b.get_x() + b.get_width() / 2, b.get_height(), f"{v:.3f}", ha="center", va="bottom", fontsize=7)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_ylabel(ylabel)
        ax.set_ylim(0.0, max(1e-6, max(values, default=0.0)) * 1.15)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)
