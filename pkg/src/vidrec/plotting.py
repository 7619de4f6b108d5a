"""Static report figures (ROC curves, per-clip STIoU bars).

Figures are written with a fixed SVG hash salt and no date metadata so the
output bytes only depend on the data.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import RocCurve  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.linewidth": 0.8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.5,
    "svg.hashsalt": "vidrec",
    "svg.fonttype": "none",
}


def _save(fig, path) -> None:
    path = Path(path)
    fmt = path.suffix.lstrip(".").lower() or "svg"
    metadata = {"Date": None} if fmt in ("svg", "pdf") else None
    fig.savefig(path, format=fmt, metadata=metadata, bbox_inches="tight")
    plt.close(fig)


def plot_roc(curves: Mapping[str, RocCurve], path, title: str = "No-referred-object detection") -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 4.0))
        ax.plot([0, 1], [0, 1], ls=":", color="0.5", label="chance (50.0)")
        for name, curve in curves.items():
            fpr = [p[0] for p in curve.points]
            tpr = [p[1] for p in curve.points]
            ax.plot(fpr, tpr, label=f"{name} ({100 * curve.auc:.1f})")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_aspect("equal")
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_title(title)
        ax.legend(loc="lower right", frameon=False)
        _save(fig, path)


def plot_clip_stiou(clip_ids: Sequence[str], values: Sequence[float], path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * len(clip_ids) + 1.5), 3.0))
        ax.bar(range(len(values)), [100 * v for v in values], color="0.35")
        ax.set_xticks(range(len(clip_ids)))
        ax.set_xticklabels(clip_ids, rotation=60, ha="right", fontsize=7)
        ax.set_ylim(0, 100)
        ax.set_ylabel("STIoU")
        _save(fig, path)
