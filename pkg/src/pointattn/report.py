"""Render report figures next to the delimited outputs.

Training writes metrics.tsv; `training_curves` turns it into a loss/CD
plot. Evaluation writes a per-category table; `category_bars` renders it.
Figures are written with the Agg backend so everything works headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .training import METRICS_COLUMNS  # noqa: E402


def read_metrics(path) -> np.ndarray:
    """Load a metrics.tsv into a (rows, columns) float array."""
    rows = np.loadtxt(path, delimiter="\t", ndmin=2)
    if rows.size and rows.shape[1] != len(METRICS_COLUMNS):
        raise ValueError(f"{path}: expected {len(METRICS_COLUMNS)} columns, "
                         f"got {rows.shape[1]}")
    return rows


def training_curves(metrics_path, out_png) -> Path:
    """Plot train loss and validation CD per epoch; returns the figure path."""
    rows = read_metrics(metrics_path)
    fig, (ax_loss, ax_cd) = plt.subplots(1, 2, figsize=(9, 3.4))
    epochs = rows[:, 0]
    ax_loss.plot(epochs, rows[:, 2], color="tab:blue", lw=1.2)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_loss.set_yscale("log")
    ax_loss.grid(alpha=0.3)
    ax_cd.plot(epochs, rows[:, 3], color="tab:orange", lw=1.2, label="val CD (l1)")
    ax_cd.plot(epochs, rows[:, 4], color="tab:green", lw=1.2, label="val CD (l2)")
    ax_cd.set_xlabel("epoch")
    ax_cd.set_ylabel("Chamfer distance")
    ax_cd.set_yscale("log")
    ax_cd.grid(alpha=0.3)
    ax_cd.legend(fontsize=8)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return out_png


def category_bars(categories, values, out_png, ylabel="Chamfer distance x 1e4") -> Path:
    """Bar chart of per-category evaluation results."""
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(categories) + 1.5), 3.2))
    xs = np.arange(len(categories))
    ax.bar(xs, values, color="tab:blue", width=0.6)
    ax.set_xticks(xs)
    ax.set_xticklabels(categories, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return out_png
