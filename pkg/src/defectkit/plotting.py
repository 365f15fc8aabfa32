"""Matplotlib figures written next to the tabular reports.

Figures are drawn on standalone ``Figure`` objects (no pyplot state), so
rendering is safe from worker threads and PNG output is reproducible.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .evaluation import MatchSet, precision_recall
from .io import ClassRegistry, DatasetStats, ReportDoc

_RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
}


def _new(width=7.0, height=3.6) -> Figure:
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    return fig


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    return path


def _class_name(registry, k):
    return registry.name_of(k) if k in registry else f"class_{k}"


def plot_class_ap(
    docs: Sequence[ReportDoc],
    path,
    registry: ClassRegistry = ClassRegistry(),
    baseline_id: Optional[str] = None,
) -> Path:
    """Grouped bars: one group per class plus mAP, one bar per run."""
    import matplotlib

    with matplotlib.rc_context(_RC):
        docs = list(docs)
        cols = docs[0].report.class_ids
        labels = [_class_name(registry, k) for k in cols] + ["mAP"]
        fig = _new(max(6.0, 1.1 * len(labels) + 0.15 * len(docs)), 3.8)
        ax = fig.add_subplot(111)
        n = len(docs)
        width = 0.8 / max(n, 1)
        x = np.arange(len(labels))
        for i, d in enumerate(docs):
            vals = [d.report.ap(k) for k in cols] + [d.report.map]
            vals = [np.nan if v is None else v for v in vals]
            kw = {"edgecolor": "black", "linewidth": 0.8} if d.run_id == baseline_id else {}
            ax.bar(x - 0.4 + width * (i + 0.5), vals, width, label=d.display, **kw)
        ax.set_xticks(x)
        ax.set_xticklabels(labels)
        ax.set_ylim(0.0, 1.05)
        ax.set_ylabel(f"AP (@{docs[0].report.iou_threshold:g} IoU)")
        ax.grid(axis="y", alpha=0.3)
        if n <= 12:
            ax.legend(ncol=min(n, 4), loc="lower right", frameon=False)
        return _save(fig, path)


def plot_pr_curves(matches: MatchSet, path, registry: ClassRegistry = ClassRegistry()) -> Path:
    """Raw and interpolated precision/recall curve for every class with ground truth."""
    import matplotlib

    with matplotlib.rc_context(_RC):
        fig = _new(4.8, 4.0)
        ax = fig.add_subplot(111)
        for k in matches.classes:
            ms = matches.for_class(k)
            if ms.gt_counts[k] == 0:
                continue
            recall, precision = precision_recall(ms)
            if len(recall) == 0:
                continue
            env = np.maximum.accumulate(precision[::-1])[::-1]
            r = np.concatenate([[0.0], recall])
            (line,) = ax.step(r, np.concatenate([[env[0]], env]), where="pre", label=_class_name(registry, k))
            ax.plot(recall, precision, ".", color=line.get_color(), alpha=0.35, markersize=3)
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(0.0, 1.05)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.grid(alpha=0.3)
        ax.legend(loc="lower left", frameon=False)
        return _save(fig, path)


def plot_dataset_stats(stats: DatasetStats, path) -> Path:
    import matplotlib

    with matplotlib.rc_context(_RC):
        reg = stats.registry
        splits = list(stats.splits)
        fig = _new(6.0, 3.4)
        ax = fig.add_subplot(111)
        x = np.arange(len(reg))
        width = 0.8 / max(len(splits), 1)
        for i, s in enumerate(splits):
            vals = [stats.splits[s].instances[k] for k in reg.ids]
            ax.bar(x - 0.4 + width * (i + 0.5), vals, width, label=f"{s} ({stats.splits[s].images} images)")
        ax.set_xticks(x)
        ax.set_xticklabels(list(reg.names))
        ax.set_ylabel("instances")
        ax.legend(frameon=False)
        return _save(fig, path)
