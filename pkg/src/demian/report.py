"""Figure rendering for the CLI report paths.

Takes plain rows/columns/values data so it stays import-light; callers
convert their domain objects first. Uses the Agg backend, never a display.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def render_matrix_heatmap(
    rows: Sequence[str],
    columns: Sequence[str],
    values: Sequence[Sequence[float]],
    path,
    title: str = "",
) -> None:
    if not rows or not columns:
        raise ValueError("heatmap needs at least one row and one column")
    fig, ax = plt.subplots(
        figsize=(max(4.0, 0.6 * len(columns) + 2.0), max(3.0, 0.4 * len(rows) + 1.5))
    )
    image = ax.imshow(values, vmin=0.0, vmax=1.0, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(columns)), labels=columns, rotation=90, fontsize=7)
    ax.set_yticks(range(len(rows)), labels=rows, fontsize=8)
    for i in range(len(rows)):
        for j in range(len(columns)):
            v = values[i][j]
            ax.text(
                j,
                i,
                f"{v:.2f}",
                ha="center",
                va="center",
                fontsize=6,
                color="white" if v < 0.5 else "black",
            )
    if title:
        ax.set_title(title)
    fig.colorbar(image, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_injection_histogram(steps: Sequence[int], path, title: str = "") -> None:
    if not steps:
        raise ValueError("histogram needs at least one injected step")
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    lo, hi = min(steps), max(steps)
    bins = range(lo, hi + 2)
    ax.hist(steps, bins=bins, align="left", rwidth=0.8, color="#4878cf")
    ax.set_xlabel("injected step")
    ax.set_ylabel("episodes")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_composite_rates(
    rates: Mapping[str, Mapping[str, float]], path, title: str = ""
) -> None:
    """Grouped bars per mode: phase-1 SR, phase-2 SR, full-task SR."""
    if not rates:
        raise ValueError("no composite rates to plot")
    modes = list(rates)
    metrics = ("phase1", "phase2", "full_task")
    width = 0.25
    fig, ax = plt.subplots(figsize=(max(4.0, 1.8 * len(modes)), 4.0))
    for k, metric in enumerate(metrics):
        xs = [i + (k - 1) * width for i in range(len(modes))]
        ys = [rates[m][metric] for m in modes]
        ax.bar(xs, ys, width=width, label=metric)
    ax.set_xticks(range(len(modes)), labels=modes)
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("success rate")
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
