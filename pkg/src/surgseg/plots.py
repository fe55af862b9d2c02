"""SVG figures: segmentation bars, confusion heat grid and filter-length sweep."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402

from .dataio import NUM_TASKS, LabelSequence  # noqa: E402
from .segeval import ConfusionMatrix  # noqa: E402

RC = {
    "svg.fonttype": "none",
    "svg.hashsalt": "surgseg",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
UNLABELLED = "#d9d9d9"


def task_colors() -> dict[int, tuple]:
    cmap = plt.get_cmap("tab20")
    colors = {k: cmap((2 * (k - 1)) % 20 + (k - 1) // 10) for k in range(1, NUM_TASKS + 1)}
    colors[0] = matplotlib.colors.to_rgba(UNLABELLED)
    return colors


def _runs(labels: np.ndarray) -> list[tuple[int, int, int]]:
    """``(label, start, length)`` for each constant run."""
    edges = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], edges])
    stops = np.concatenate([edges, [len(labels)]])
    return [(int(labels[a]), int(a), int(b - a)) for a, b in zip(starts, stops)]


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _arr(seq) -> np.ndarray:
    return seq.labels if isinstance(seq, LabelSequence) else np.asarray(seq, dtype=np.int64)


def plot_segmentation(G, raw, filtered, path, task_names: dict[int, str] | None = None,
                      title: str = "", rate: float | None = None) -> Path:
    """Ground truth, raw and filtered predictions as three stacked colour bars."""
    rows = [_arr(G), _arr(raw), _arr(filtered)]
    if len({len(r) for r in rows}) != 1:
        raise ValueError(f"sequence lengths differ: {[len(r) for r in rows]}")
    rate = rate or (G.rate if isinstance(G, LabelSequence) else 1.0)
    colors = task_colors()
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(9, 2.6))
        names = ["ground truth", "raw", "filtered"]
        for y, labels in enumerate(rows):
            runs = _runs(labels)
            ax.broken_barh([(s / rate, n / rate) for _, s, n in runs], (2 - y - 0.4, 0.8),
                           facecolors=[colors[k] for k, _, _ in runs], linewidth=0)
        ax.set_yticks([2, 1, 0], names)
        ax.set_xlim(0, len(rows[0]) / rate)
        ax.set_ylim(-0.6, 2.6)
        ax.set_xlabel("time (s)")
        ax.spines["left"].set_visible(False)
        ax.tick_params(axis="y", length=0)
        if title:
            ax.set_title(title, loc="left")
        handles = [Patch(color=colors[k], label=f"T{k}" + (f" {task_names[k]}" if task_names else ""))
                   for k in range(1, NUM_TASKS + 1)]
        ax.legend(handles=handles, ncol=6 if not task_names else 3, fontsize=6, frameon=False,
                  loc="upper center", bbox_to_anchor=(0.5, -0.35))
        fig.tight_layout()
        return _save(fig, path)


def plot_confusion(cm: ConfusionMatrix | np.ndarray, path, title: str = "") -> Path:
    """Heat grid with the count printed in every non-empty cell; empty cells stay white."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    n = counts.shape[0]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.2, 4.6))
        masked = np.ma.masked_equal(counts, 0)
        cmap = plt.get_cmap("Blues").copy()
        cmap.set_bad("white")
        im = ax.imshow(masked, cmap=cmap, vmin=0, vmax=max(int(counts.max()), 1))
        top = counts.max() or 1
        for g in range(n):
            for p in range(n):
                if counts[g, p]:
                    ax.text(p, g, str(int(counts[g, p])), ha="center", va="center", fontsize=6,
                            color="white" if counts[g, p] > 0.6 * top else "black", gid=f"cell-{g + 1}-{p + 1}")
        ticks = np.arange(n)
        ax.set_xticks(ticks, [str(k + 1) for k in ticks])
        ax.set_yticks(ticks, [str(k + 1) for k in ticks])
        ax.set_xlabel("predicted task")
        ax.set_ylabel("true task")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        fig.tight_layout()
        return _save(fig, path)


def plot_filter_sweep(results: Sequence[tuple[int, float]], path, raw_value: float | None = None) -> Path:
    F, J = zip(*results) if results else ((), ())
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(F, J, marker="o", markersize=3)
        if raw_value is not None:
            ax.axhline(raw_value, color="grey", linestyle="--", linewidth=1, label="unfiltered")
            ax.legend(frameon=False)
        ax.set_xscale("log")
        ax.set_xlabel("filter length F (samples)")
        ax.set_ylabel("mean Jaccard")
        fig.tight_layout()
        return _save(fig, path)
