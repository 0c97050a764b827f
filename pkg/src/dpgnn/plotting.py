"""Figures for training curves and ablation reports.

Uses the object-oriented matplotlib API with the Agg canvas, so importing this
module never touches the global pyplot state or requires a display.
"""

from __future__ import annotations

import json

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {
    "figsize": (6.0, 3.8),
    "dpi": 120,
}
TRAIN_COLOR = "#1f77b4"
VAL_COLOR = "#d62728"


def _new_figure(figsize=None):
    fig = Figure(figsize=figsize or STYLE["figsize"], dpi=STYLE["dpi"])
    FigureCanvasAgg(fig)
    return fig


def _save(fig, path, config=None):
    metadata = {"Software": "dpgnn"}
    if config is not None:
        metadata["Description"] = json.dumps(config, sort_keys=True)
    fig.savefig(path, metadata=metadata)


def plot_training_curves(results, path, title=None, config=None):
    """Mean train/validation accuracy per epoch for one or more labelled runs.

    ``results`` maps a legend label to a :class:`~dpgnn.training.CvResult`;
    a bare ``CvResult`` is accepted too.
    """
    if not isinstance(results, dict):
        results = {"": results}
    fig = _new_figure()
    ax = fig.add_subplot(1, 1, 1)
    styles = ["-", "--", ":", "-."]
    for i, (label, res) in enumerate(results.items()):
        ls = styles[i % len(styles)]
        epochs = np.arange(1, len(res.mean_train_accuracy) + 1)
        prefix = f"{label} " if label else ""
        ax.plot(epochs, res.mean_train_accuracy, ls, color=TRAIN_COLOR, lw=1.2,
                label=f"{prefix}train")
        ax.plot(epochs, res.mean_validation_accuracy, ls, color=VAL_COLOR, lw=1.2,
                label=f"{prefix}validation")
        ax.axvline(res.selected_epoch + 1, color="0.6", lw=0.6, ls=ls)
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy (mean over folds)")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize=8, frameon=False)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    _save(fig, path, config)
    return fig


def plot_ablation(report, path, title=None, config=None):
    """Bar chart of the six ablation accuracies; the baseline is drawn as a line."""
    fig = _new_figure((6.0, 3.2))
    ax = fig.add_subplot(1, 1, 1)
    labels = [f"{r.label}\n{r.weights.label()}" for r in report.rows]
    acc = [r.accuracy for r in report.rows]
    colors = ["0.55"] + [TRAIN_COLOR] * (len(acc) - 2) + [VAL_COLOR]
    ax.bar(range(len(acc)), acc, color=colors, width=0.65)
    ax.axhline(acc[0], color="0.3", lw=0.8, ls="--")
    lo = max(0.0, min(acc) - 0.1)
    ax.set_ylim(lo, min(1.0, max(acc) + 0.05))
    ax.set_xticks(range(len(acc)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("best mean validation accuracy")
    for i, a in enumerate(acc):
        ax.text(i, a, f"{a:.4f}", ha="center", va="bottom", fontsize=7)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    _save(fig, path, config)
    return fig
