"""Matplotlib renderings of the report data, written next to the CSVs.

Figures are a convenience view; the delimited files stay the ground truth.
Everything renders through the Agg backend so headless runs work.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_PNG_KW = {"dpi": 130, "bbox_inches": "tight"}


def render_label_shift_curve(ks, series, points, path, metric="accuracy"):
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    for name in series:
        ax.plot(ks, [points[(k, name)] for k in ks], marker="o", label=name)
    ax.set_xlabel("classes kept in the target")
    ax.set_ylabel(metric)
    ax.set_xticks(ks)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.savefig(path, **_PNG_KW)
    plt.close(fig)


def render_metric_bars(rows, path, title, metric="accuracy"):
    """Grouped bars, one per report row (cell label on the x axis)."""
    labels = [r.experiment.split("/", 1)[1] for r in rows]
    values = [r.value for r in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(rows) + 1.5), 3.2))
    ax.bar(range(len(rows)), values, color="#4878d0")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    ax.set_title(title, fontsize=10)
    ax.grid(axis="y", alpha=0.3)
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=7)
    fig.savefig(path, **_PNG_KW)
    plt.close(fig)


def render_analytic_rows(rows, path):
    """Closed forms vs Monte Carlo, error bars at three standard errors."""
    with_mc = [r for r in rows if r.mc_estimate is not None]
    picked = with_mc or rows
    labels = [f"{r.experiment}\n{r.quantity}" for r in picked]
    closed = [r.closed_form for r in picked]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(picked) + 1.5), 3.4))
    xs = range(len(picked))
    ax.bar(xs, closed, color="#4878d0", label="closed form")
    if with_mc:
        ax.errorbar(
            xs,
            [r.mc_estimate for r in picked],
            yerr=[3.0 * (r.mc_se or 0.0) for r in picked],
            fmt="k.",
            capsize=3,
            label="Monte Carlo (3 SE)",
        )
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("value")
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    fig.savefig(path, **_PNG_KW)
    plt.close(fig)
