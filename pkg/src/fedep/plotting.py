"""Figures rendered next to the delimited outputs (Agg backend, PNG)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

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
    "figure.dpi": 100,
}
FIGSIZE = (4.8, 3.2)


def _save(fig, path: str | Path, header: str) -> Path:
    path = Path(path)
    # PNG text chunk carries the same header line as the text outputs
    fig.savefig(path, metadata={"Description": header, "Software": None})
    plt.close(fig)
    return path


def roc_figure(curves: dict[str, Sequence[tuple[float, float]]], path, header: str) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        for name, pts in curves.items():
            pts = np.asarray(pts)
            ax.plot(pts[:, 0], pts[:, 1], lw=1.2, label=name)
        ax.plot([0, 1], [0, 1], ls=":", c="0.6", lw=0.8)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        return _save(fig, path, header)


def rounds_figure(rounds: Sequence[int], series: dict[str, Sequence[float | None]], path, header: str,
                  ylabel: str = "score") -> Path:
    """Per-round metric curves; None entries are left as gaps."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        for name, vals in series.items():
            y = np.array([np.nan if v is None else v for v in vals], dtype=float)
            ax.plot(rounds, y, marker="o", ms=2.5, lw=1.0, label=name)
        ax.set_xlabel("communication round")
        ax.set_ylabel(ylabel)
        if len(series) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path, header)


def lagrangian_figure(values: Sequence[float], path, header: str) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        ax.plot(np.arange(len(values)), values, lw=1.2, c="k")
        ax.set_xlabel("communication round")
        ax.set_ylabel("augmented Lagrangian")
        fig.tight_layout()
        return _save(fig, path, header)


def importance_figure(names: Sequence[str], values: Sequence[float], path, header: str, top: int = 20) -> Path:
    values = np.asarray(values, dtype=float)
    order = np.argsort(-values, kind="stable")[:top]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(FIGSIZE[0], max(2.0, 0.18 * len(order) + 0.8)))
        ax.barh(np.arange(len(order))[::-1], values[order], color="0.35")
        ax.set_yticks(np.arange(len(order))[::-1])
        ax.set_yticklabels([names[i] for i in order])
        ax.set_xlabel("sum of absolute loadings")
        fig.tight_layout()
        return _save(fig, path, header)


def timing_figure(client_counts: Sequence[int], median_ms: Sequence[float], path, header: str) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        ax.plot(client_counts, median_ms, marker="s", ms=3, lw=1.2, c="k")
        ax.set_xlabel("number of clients")
        ax.set_ylabel("time per round (ms)")
        fig.tight_layout()
        return _save(fig, path, header)


def bar_figure(labels: Sequence[str], series: dict[str, Sequence[float | None]], path, header: str,
               xlabel: str = "") -> Path:
    """Grouped bars, one group per label (ablation cases, ranks)."""
    x = np.arange(len(labels))
    width = 0.8 / max(1, len(series))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        for k, (name, vals) in enumerate(series.items()):
            y = [np.nan if v is None else v for v in vals]
            ax.bar(x + (k - (len(series) - 1) / 2) * width, y, width, label=name)
        ax.set_xticks(x)
        ax.set_xticklabels(labels)
        ax.set_xlabel(xlabel)
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False, ncol=len(series))
        fig.tight_layout()
        return _save(fig, path, header)
