"""Figure rendering for run outputs.

Takes the delimited/JSON files that the CLI subcommands produce and
renders the standard summary figures next to them: accuracy over bit
error rate, the margin-tolerance curve over the b grid, and the
per-neuron importance scatter.  Rendering is headless (Agg) and
deterministic; figures are written as PNG.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _style():
    plt.rcParams.update(
        {
            "figure.dpi": 110,
            "font.size": 10,
            "axes.grid": True,
            "grid.alpha": 0.3,
            "legend.frameon": False,
        }
    )


def fig_accuracy_over_ber(curves: list, out_path: str):
    """Accuracy versus bit error rate, one line per labeled model.

    curves: list of (label, bers, mean_accuracies).
    """
    _style()
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for i, (label, bers, accs) in enumerate(curves):
        ax.plot(bers, accs, marker="o", markersize=4,
                color=PALETTE[i % len(PALETTE)], label=label)
    ax.set_xlabel("bit error rate")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def fig_tolerance_curve(curves: list, out_path: str):
    """Margin-tolerance fractions over the b grid (log2 x-axis).

    curves: list of (label, grid, per_b_values).
    """
    _style()
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for i, (label, grid, values) in enumerate(curves):
        ax.plot(grid, values, marker="s", markersize=4,
                color=PALETTE[i % len(PALETTE)], label=label)
    ax.set_xscale("log", base=2)
    ax.set_xticks(list(curves[0][1]) if curves else [])
    ax.get_xaxis().set_major_formatter(plt.ScalarFormatter())
    ax.set_xlabel("margin threshold b")
    ax.set_ylabel("fraction of positions with margin ≥ b")
    ax.set_ylim(0.0, 1.0)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def fig_importance_scatter(groups: list, out_path: str):
    """Per-neuron importance values, one jittered column per model.

    groups: list of (label, pi_values).
    """
    _style()
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    rng = np.random.default_rng(7)
    for i, (label, pi) in enumerate(groups):
        pi = np.asarray(pi, dtype=np.float64)
        x = i + rng.uniform(-0.18, 0.18, size=pi.shape)
        ax.scatter(x, pi, s=14, alpha=0.75, color=PALETTE[i % len(PALETTE)], label=label)
    ax.axhline(0.0, color="black", linewidth=0.8, alpha=0.5)
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels([g[0] for g in groups], rotation=20, ha="right")
    ax.set_ylabel("neuron importance")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
