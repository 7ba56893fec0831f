"""Matplotlib rendering for analysis reports (file output only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .analysis import SelectionReport

# stable PNG metadata keeps figure bytes reproducible across runs
_PNG_METADATA = {"Software": "synthsel"}


def render_score_histogram(report: SelectionReport, path: str | Path) -> Path:
    """Score distribution with the configured ranges shaded."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4))
    edges = list(report.bin_edges)
    widths = [b - a for a, b in zip(edges, edges[1:])]
    ax.bar(edges[:-1], report.bin_counts, width=widths, align="edge",
           color="#4878a8", edgecolor="none")
    for i, rc in enumerate(report.ranges):
        ax.axvspan(rc.srange.low, rc.srange.high, alpha=0.12,
                   color=["#d1495b", "#66a182", "#edae49"][i % 3])
        ax.axvline(rc.srange.low, color="0.4", lw=0.8, ls=":")
    ax.set_xlabel(f"{report.method} score")
    ax.set_ylabel("utterances")
    ax.set_title(f"score distribution (n={report.total})")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def render_range_counts(report: SelectionReport, path: str | Path) -> Path:
    """Bar chart of per-range counts with fractions annotated."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [f"[{rc.srange.low:g}, {rc.srange.high:g})" for rc in report.ranges]
    counts = [rc.count for rc in report.ranges]
    bars = ax.bar(range(len(counts)), counts, color="#66a182")
    for bar, rc in zip(bars, report.ranges):
        ax.annotate(f"{100 * rc.fraction:.1f}%",
                    (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=9)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels)
    ax.set_ylabel("utterances")
    ax.set_title(f"utterances per scoring range ({report.method})")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)
    return path
