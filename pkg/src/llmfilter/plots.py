"""Figures for iteration statistics (written next to the tabular report)."""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path

import matplotlib
from matplotlib.figure import Figure

from .orchestrator import IterationStats

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "llmfilter",
}

HOURS_COLORS = ("#9e9e9e", "#404040")
ERR_COLORS = ("#c0392b", "#2471a3")


def plot_iteration_stats(stats_list: Sequence[IterationStats], path: str | Path) -> Path:
    """Two panels: total vs filtered hours per iteration, and greedy vs filtered error rate.

    The file type follows the suffix of ``path``; PNG output carries no
    timestamp or version metadata so reruns are byte-identical.
    """
    path = Path(path)
    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(7.0, 2.8))
        ax_h, ax_e = fig.subplots(1, 2)
        iters = [s.iteration_index for s in stats_list]
        width = 0.38
        ax_h.bar([i - width / 2 for i in iters], [s.total_hours for s in stats_list],
                 width, color=HOURS_COLORS[0], label="total")
        ax_h.bar([i + width / 2 for i in iters], [s.filtered_hours for s in stats_list],
                 width, color=HOURS_COLORS[1], label="filtered")
        ax_h.set_xlabel("iteration")
        ax_h.set_ylabel("hours")
        ax_h.set_xticks(iters)
        top = max((s.total_hours for s in stats_list), default=0.0)
        ax_h.set_ylim(0, top * 1.3 if top > 0 else 1.0)
        ax_h.legend(frameon=False, ncol=2, loc="upper left")

        metric = stats_list[0].metric if stats_list else "MER"
        for attr, label, color in (
            ("greedy_err", "greedy", ERR_COLORS[0]),
            ("filtered_err", "LLM filtered", ERR_COLORS[1]),
        ):
            pts = [(s.iteration_index, 100 * getattr(s, attr)) for s in stats_list
                   if getattr(s, attr) is not None]
            if pts:
                xs, ys = zip(*pts)
                ax_e.plot(xs, ys, marker="o", color=color, label=label)
        ax_e.set_xlabel("iteration")
        ax_e.set_ylabel(f"{metric} (%)")
        ax_e.set_xticks(iters)
        ax_e.set_ylim(bottom=0)
        if ax_e.has_data():
            ax_e.legend(frameon=False)
        fig.tight_layout()

        path.parent.mkdir(parents=True, exist_ok=True)
        metadata = {"Software": None} if path.suffix.lower() == ".png" else None
        fig.savefig(path, dpi=120, metadata=metadata)
    return path
