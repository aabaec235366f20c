"""Report figures. Uses the non-interactive Agg backend; every function
writes one PNG and returns its path."""

from __future__ import annotations

import functools
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STRATEGY_LABELS = {"mbs": "MBS", "fixed": "Fixed", "adaptive": "Adaptive"}

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _styled(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with plt.rc_context(STYLE):
            return fn(*args, **kwargs)

    return wrapper


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


@_styled
def plot_crop_grid(rows: Sequence[Mapping], path: str | Path, title: str = "") -> Path:
    """Grouped bars: one group per strategy, masked vs unmasked, for macro
    and weighted precision side by side."""
    strategies = list(dict.fromkeys(r["strategy"] for r in rows))
    lookup = {(r["strategy"], r["masked"]): r for r in rows}
    fig, axes = plt.subplots(1, 2, figsize=(7.5, 3.0), sharey=True)
    x = np.arange(len(strategies))
    width = 0.38
    for ax, metric in zip(axes, ("macro_precision", "weighted_precision")):
        for offset, masked, color in ((-width / 2, False, "#9a9a9a"), (width / 2, True, "#d98c1f")):
            vals = [lookup[(s, masked)][metric] if (s, masked) in lookup else np.nan for s in strategies]
            ax.bar(x + offset, vals, width, color=color, label="w/ [OBJ] mask" if masked else "w/o mask")
        ax.set_xticks(x, [STRATEGY_LABELS.get(s, s) for s in strategies])
        ax.set_title(metric.replace("_", " "))
        ax.set_ylim(0, 1)
    axes[0].set_ylabel("precision")
    axes[1].legend(frameon=False, loc="upper right")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


@_styled
def plot_pr_curves(curves: Mapping[str, tuple[np.ndarray, np.ndarray]], path: str | Path) -> Path:
    """Precision-recall curves, one line per category."""
    fig, ax = plt.subplots(figsize=(4.0, 3.2))
    for name, (recall, precision) in curves.items():
        if len(recall):
            ax.step(np.concatenate([[0.0], recall]), np.concatenate([[precision[0]], precision]), where="post", label=name)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    if curves:
        ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


@_styled
def plot_pl_histogram(per_category: Mapping[str, int], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.0, 3.0))
    names = list(per_category)
    ax.bar(range(len(names)), [per_category[n] for n in names], color="#4a7ab5")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_ylabel("pseudo labels")
    fig.tight_layout()
    return _save(fig, path)
