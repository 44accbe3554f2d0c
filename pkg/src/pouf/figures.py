"""Figure rendering for the report path.

Everything here draws from already-computed report data (histogram counts,
2-D projections, per-iteration training metrics) and writes PNG files next
to the delimited output. The data itself stays in the evaluation module;
this module only renders. Uses the Agg backend so rendering works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np

from .errors import ValidationError

FIGURE_DPI = 100
# Per-term training losses rendered when present in the records.
_CURVE_KEYS = ("loss_total", "loss_transport", "loss_mi", "loss_entropy", "loss_ce")


def render_histogram(path, edges, counts, title="Correct-class cosine similarity"):
    """Bar chart of a binned cosine histogram; returns the path written."""
    edges = np.asarray(edges, dtype=np.float64)
    counts = np.asarray(counts)
    if edges.ndim != 1 or counts.ndim != 1 or edges.size != counts.size + 1:
        raise ValidationError(
            f"expected len(edges) == len(counts) + 1, got {edges.size} and {counts.size}"
        )
    widths = np.diff(edges)
    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=FIGURE_DPI)
    try:
        ax.bar(edges[:-1], counts, width=widths, align="edge", edgecolor="black")
        ax.set_xlabel("cosine similarity to correct prototype")
        ax.set_ylabel("count")
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
    finally:
        plt.close(fig)
    return path


def render_pca(path, coords, labels=None, title="Feature projection"):
    """Scatter plot of 2-D coordinates, colored by label when given."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValidationError(f"expected coordinates of shape (m, 2), got {coords.shape}")
    fig, ax = plt.subplots(figsize=(5.0, 5.0), dpi=FIGURE_DPI)
    try:
        if labels is None:
            ax.scatter(coords[:, 0], coords[:, 1], s=12)
        else:
            labels = np.asarray(labels)
            if labels.shape != (coords.shape[0],):
                raise ValidationError(
                    f"expected {coords.shape[0]} labels, got shape {labels.shape}"
                )
            for value in np.unique(labels):
                mask = labels == value
                ax.scatter(coords[mask, 0], coords[mask, 1], s=12, label=str(value))
            ax.legend(title="class", fontsize="small")
        ax.set_xlabel("component 1")
        ax.set_ylabel("component 2")
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
    finally:
        plt.close(fig)
    return path


def render_ablation(path, variants, means, stds, title="Accuracy by variant"):
    """Bar chart of per-variant mean accuracy with std error bars."""
    variants = list(variants)
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    if not variants or means.shape != (len(variants),) or stds.shape != (len(variants),):
        raise ValidationError(
            "variants, means, and stds must be non-empty and the same length"
        )
    x = np.arange(len(variants))
    fig, ax = plt.subplots(figsize=(7.0, 4.0), dpi=FIGURE_DPI)
    try:
        ax.bar(x, means, yerr=stds, capsize=4.0)
        ax.set_xticks(x)
        ax.set_xticklabels(variants, rotation=20, ha="right")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0.0, 1.0)
        ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
    finally:
        plt.close(fig)
    return path


def render_training_curves(path, records, title="Training curves"):
    """Loss curves per iteration, with accuracy on a twin axis when logged."""
    records = list(records)
    if not records:
        raise ValidationError("no training records to plot")
    iterations = [r["iter"] for r in records]
    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=FIGURE_DPI)
    try:
        for key in _CURVE_KEYS:
            if key in records[0]:
                ax.plot(iterations, [r[key] for r in records], label=key)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_title(title)
        handles, labels_ = ax.get_legend_handles_labels()
        if "accuracy" in records[0]:
            twin = ax.twinx()
            (line,) = twin.plot(
                iterations,
                [r["accuracy"] for r in records],
                color="black",
                linestyle="--",
                label="accuracy",
            )
            twin.set_ylabel("accuracy")
            twin.set_ylim(0.0, 1.0)
            handles.append(line)
            labels_.append("accuracy")
        ax.legend(handles, labels_, fontsize="small")
        fig.tight_layout()
        fig.savefig(path)
    finally:
        plt.close(fig)
    return path
