"""Matplotlib defaults and figure helpers for run reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

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
    "lines.linewidth": 1.5,
    "lines.markersize": 5,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

SCHEME_COLOURS = {
    "teacher_only": "#444444",
    "simdis_off": "#1f77b4",
    "simdis_on": "#d62728",
    "simdis_on_7v": "#2ca02c",
    "custom": "#9467bd",
}


def figure(ncols: int = 1, width: float = 3.4, height: float = 2.6):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, height), squeeze=False)
    return fig, axes[0]


def save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
    return path


def accuracy_curves(series: dict, path: str | Path) -> Path:
    """Top-1 and top-5 against pretraining epochs; ``series`` maps label -> list of (epochs, top1, top5)."""
    fig, (ax1, ax5) = figure(ncols=2)
    with plt.rc_context(STYLE):
        for label, points in sorted(series.items()):
            points = sorted(points)
            xs = [p[0] for p in points]
            scheme = label.split(" ")[0]
            colour = SCHEME_COLOURS.get(scheme)
            ax1.plot(xs, [p[1] for p in points], "o-", label=label, color=colour)
            ax5.plot(xs, [p[2] for p in points], "o-", label=label, color=colour)
        for ax, name in ((ax1, "Top-1"), (ax5, "Top-5")):
            ax.set_xlabel("pretraining epochs")
            ax.set_ylabel(f"{name} accuracy (%)")
            ax.set_title(name)
        ax1.legend(loc="best")
    return save(fig, path)


def view_ablation_bars(rows: list[dict], path: str | Path) -> Path:
    """Grouped bars of online/offline top-1 per view-target row."""
    fig, (ax,) = figure(width=6.0, height=2.8)
    with plt.rc_context(STYLE):
        xs = range(len(rows))
        for offset, mode, colour in ((-0.2, "online", "#d62728"), (0.2, "offline", "#1f77b4")):
            vals = [r.get(mode) for r in rows]
            ax.bar([x + offset for x, v in zip(xs, vals) if v is not None], [v for v in vals if v is not None],
                   width=0.4, label=mode, color=colour)
        ax.set_xticks(list(xs))
        ax.set_xticklabels([str(r["num_views"]) + "v\n" + str(i + 1) for i, r in enumerate(rows)])
        ax.set_xlabel("view-target row (views predicted)")
        ax.set_ylabel("student top-1 (%)")
        ax.legend(loc="best")
    return save(fig, path)
