"""Figures for run reports, rendered off-screen to PNG."""

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
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
}

# PNG metadata would otherwise carry the library version
_META = {"Software": None}


def figsize(scale: float = 1.0, ratio: float = 0.62) -> tuple[float, float]:
    width = 5.5 * scale
    return width, width * ratio


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def plot_tradeoff(points, path, static: tuple[float, float] | None = None, chosen=None, title: str = ""):
    """Accuracy against mean MACs for every swept policy, frontier highlighted.

    ``static`` is an optional ``(macs, accuracy)`` reference; ``chosen`` a
    point to mark.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        macs = np.array([float(p.mean_macs) for p in points]) / 1e6
        acc = np.array([p.accuracy for p in points]) * 100
        front = np.array([p.pareto for p in points], dtype=bool)
        ax.scatter(macs, acc, s=6, color="0.7", label="policies")
        ax.plot(macs[front], acc[front], "-o", ms=3, color="C0", label="Pareto frontier")
        if static is not None:
            ax.scatter([static[0] / 1e6], [static[1] * 100], marker="s", color="C3", label="static")
        if chosen is not None:
            ax.scatter([float(chosen.mean_macs) / 1e6], [chosen.accuracy * 100], marker="*", s=80,
                       color="C1", label="selected", zorder=3)
        ax.set_xlabel("mean MACs (M)")
        ax.set_ylabel("accuracy (%)")
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_exit_fractions(stats, path, title: str = ""):
    """Share of samples leaving at each stage, with per-stage accuracy on top."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(0.8))
        stages = np.arange(1, len(stats.exits) + 1)
        frac = np.array(stats.fractions) * 100
        bars = ax.bar(stages, frac, color="C0")
        for b, a in zip(bars, stats.stage_accuracy):
            if not np.isnan(a):
                ax.annotate(f"{a * 100:.1f}%", (b.get_x() + b.get_width() / 2, b.get_height()),
                            ha="center", va="bottom", fontsize=7)
        ax.set_xticks(stages)
        ax.set_xlabel("exit stage")
        ax.set_ylabel("samples (%)")
        ax.set_title(title or f"overall accuracy {stats.accuracy * 100:.2f}%")
        return _save(fig, path)


def plot_search_trace(rewards: Sequence[float], path, title: str = ""):
    """Reward of each sampled candidate and the running best."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        r = np.asarray(rewards, dtype=float)
        n = np.arange(1, len(r) + 1)
        ax.plot(n, r, ".", ms=3, color="0.6", label="sample")
        if len(r):
            ax.plot(n, np.maximum.accumulate(r), color="C0", label="best so far")
        ax.set_xlabel("samples drawn")
        ax.set_ylabel("reward")
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_history(rows: Sequence[dict], path, title: str = ""):
    """Training loss and per-stage validation accuracy by epoch."""
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=figsize(1.2, 0.4))
        ep = [r["epoch"] for r in rows]
        a1.plot(ep, [r["loss"] for r in rows], color="C0")
        a1.set_xlabel("epoch")
        a1.set_ylabel("joint loss")
        accs = np.array([r["acc"] for r in rows], dtype=float)
        for i in range(accs.shape[1] if accs.ndim == 2 else 0):
            a2.plot(ep, accs[:, i] * 100, label=f"stage {i + 1}")
        a2.set_xlabel("epoch")
        a2.set_ylabel("val accuracy (%)")
        if accs.ndim == 2 and accs.shape[1]:
            a2.legend(loc="lower right")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)
