"""PNG figures written next to the CSV/JSON outputs of the CLI.

Figures are drawn on the Agg canvas directly, so importing this module never
touches a display or the global pyplot state.
"""

from __future__ import annotations

import os
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.ticker import MaxNLocator

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
}
DPI = 120


def _figure(ncols: int = 1, width: float = 4.2, height: float = 3.0):
    import matplotlib

    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=(width * ncols, height), constrained_layout=True)
        FigureCanvasAgg(fig)
        axes = fig.subplots(1, ncols, squeeze=False)[0]
    return fig, axes


def _save(fig: Figure, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, format="png", metadata={"Software": None})
    return path


def plot_history(history: Sequence[dict], path: str | os.PathLike) -> Path:
    """Training losses per epoch (left) and validation selection metrics (right)."""
    fig, (ax_l, ax_v) = _figure(2)
    epochs = [r["epoch"] for r in history]
    for key in ("L_total", "L_task", "L_SALM", "L_M", "L_A"):
        vals = [r["train"].get(key, np.nan) for r in history]
        if any(v != 0 for v in vals):
            ax_l.plot(epochs, vals, label=key)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("mean train loss")
    ax_l.legend(fontsize=7)
    vals = [r.get("val", {}) for r in history]
    for key in ("source_SODA_tIoU", "source_dvc_C"):
        ys = [v.get(key, np.nan) for v in vals]
        if not all(np.isnan(ys)):
            ax_v.plot(epochs, ys, marker="o", ms=3, label=key)
    best = history[-1].get("best_epoch") if history else None
    if best:
        ax_v.axvline(best, color="grey", ls="--", lw=1, label="selected")
    ax_v.set_xlabel("epoch")
    for ax in (ax_l, ax_v):
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax_v.set_ylabel("validation")
    ax_v.legend(fontsize=7)
    return _save(fig, path)


def plot_distances(rows: Sequence[dict], path: str | os.PathLike) -> Path:
    """Per-pair centroid distances for the three representation stages."""
    stages = ("raw", "converted", "calibrated")
    pairs = [r for r in rows if r["pair"] != "mean"]
    fig, (ax,) = _figure(1, width=4.8)
    x = np.arange(len(stages))
    for r in pairs:
        ax.plot(x, [r[s] for s in stages], color="tab:blue", alpha=0.25, lw=0.8)
    if pairs:
        ax.plot(x, [np.mean([r[s] for r in pairs]) for s in stages], color="k", marker="o", label="mean")
    ax.set_xticks(x, stages)
    ax.set_ylabel("source/target centroid distance")
    if pairs and min(min(r[s] for s in stages) for r in pairs) > 0:
        ax.set_yscale("log")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_entropy(rows: Sequence[dict], path: str | os.PathLike) -> Path:
    """Mean attention entropy per level and view against the uniform bound."""
    acc = defaultdict(list)
    bound = {}
    for r in rows:
        acc[(r["view"], r["level"])].append(r["entropy"])
        bound[r["level"]] = r["max_entropy"]
    levels = sorted(bound)
    fig, (ax,) = _figure(1)
    for view in sorted({v for v, _ in acc}):
        ax.plot(levels, [np.mean(acc[(view, lv)]) for lv in levels], marker="o", label=view)
    ax.plot(levels, [bound[lv] for lv in levels], color="grey", ls=":", label="ln L")
    ax.set_xticks(levels)
    ax.set_xlabel("calibration level")
    ax.set_ylabel("attention entropy (nats)")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_report(report: dict, path: str | os.PathLike) -> Path:
    """Caption scores at each tIoU threshold, with the averaged values in the title."""
    thr = sorted(report["per_threshold"], key=float)
    fig, (ax,) = _figure(1)
    x = np.arange(len(thr))
    ax.bar(x - 0.2, [report["per_threshold"][t]["B4"] for t in thr], 0.4, label="BLEU-4")
    ax2 = ax.twinx()
    ax2.bar(x + 0.2, [report["per_threshold"][t]["C"] for t in thr], 0.4, color="tab:orange", label="CIDEr-D")
    ax.set_xticks(x, [f"{float(t):.1f}" for t in thr])
    ax.set_xlabel("tIoU threshold")
    ax.set_ylabel("BLEU-4")
    ax2.set_ylabel("CIDEr-D")
    ax.set_title(f"SODA_tIoU {report['SODA_tIoU']:.3f}   SODA_C {report['SODA_C']:.3f}", fontsize=8)
    handles = ax.get_legend_handles_labels()[0] + ax2.get_legend_handles_labels()[0]
    ax.legend(handles, ["BLEU-4", "CIDEr-D"], fontsize=7, loc="upper right")
    return _save(fig, path)


def plot_parameter_counts(counts: dict[str, int], path: str | os.PathLike) -> Path:
    fig, (ax,) = _figure(1, width=5.0, height=0.3 * len(counts) + 1.2)
    names = list(counts)
    ax.barh(np.arange(len(names)), [counts[n] for n in names])
    ax.set_yticks(np.arange(len(names)), names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("parameters")
    return _save(fig, path)
