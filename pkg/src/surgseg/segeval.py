"""Window predictions to label sequences, median-filter smoothing and metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import NUM_TASKS, LabelSequence

FILTER_MODES = ("median", "mode")


class TilingError(ValueError):
    pass


@dataclass(frozen=True)
class FilterConfig:
    """Running filter of odd length ``F``. ``F = 1`` disables filtering."""

    F: int = 301
    mode: str = "median"

    def __post_init__(self):
        if not isinstance(self.F, (int, np.integer)) or self.F < 1:
            raise ValueError(f"filter length must be a positive integer, got {self.F!r}")
        if self.F % 2 == 0:
            raise ValueError(f"filter length must be odd, got {self.F}")
        if self.mode not in FILTER_MODES:
            raise ValueError(f"unknown filter mode {self.mode!r}")


def _labels(seq) -> np.ndarray:
    if isinstance(seq, LabelSequence):
        return seq.labels
    return np.asarray(seq, dtype=np.int64)


def assemble_sequence(window_preds: Sequence[tuple[int, int]], W: int, N: int, rate: float = 5.0) -> LabelSequence:
    """Paint each window's label over its ``W`` samples (the last one may run past ``N``)."""
    if W < 1 or N < 1:
        raise ValueError("W and N must be positive")
    out = np.zeros(N, dtype=np.int64)
    pos = 0
    for start, label in sorted(window_preds, key=lambda p: p[0]):
        if start > pos:
            raise TilingError(f"gap in window tiling: samples [{pos}, {start}) uncovered")
        if start < pos:
            raise TilingError(f"overlapping windows at sample {start}")
        if start >= N:
            raise TilingError(f"window start {start} beyond sequence length {N}")
        out[start:start + W] = label
        pos = start + W
    if pos < N:
        raise TilingError(f"gap in window tiling: samples [{pos}, {N}) uncovered")
    return LabelSequence(out, rate)


def _lower_median(x: np.ndarray) -> int:
    return int(np.sort(x)[(len(x) - 1) // 2])


def _mode(x: np.ndarray) -> int:
    vals, counts = np.unique(x, return_counts=True)
    return int(vals[np.argmax(counts)])


def median_filter(seq, cfg: FilterConfig = FilterConfig()) -> LabelSequence:
    """Running median (or mode) of length ``F`` with corner padding.

    The front is padded with ``(F-1)/2`` copies of the median of the first
    ``F`` labels and the back likewise with the last ``F``. Sequences shorter
    than ``F`` are padded with the median of the whole sequence (the lower
    median when the length is even).
    """
    x = _labels(seq)
    rate = seq.rate if isinstance(seq, LabelSequence) else 5.0
    if len(x) == 0:
        raise ValueError("cannot filter an empty sequence")
    F = cfg.F
    if F == 1:
        return LabelSequence(x.copy(), rate)
    half = (F - 1) // 2
    centre = _lower_median if cfg.mode == "median" else _mode
    head, tail = (x, x) if len(x) < F else (x[:F], x[-F:])
    padded = np.concatenate([np.full(half, centre(head)), x, np.full(half, centre(tail))])

    # sliding histogram over the (small) label alphabet
    values, codes = np.unique(padded, return_inverse=True)
    onehot = np.zeros((len(padded) + 1, len(values)), dtype=np.int32)
    onehot[np.arange(1, len(padded) + 1), codes] = 1
    cum = np.cumsum(onehot, axis=0, out=onehot)
    counts = cum[F:] - cum[:-F]
    if cfg.mode == "median":
        idx = np.argmax(np.cumsum(counts, axis=1) >= half + 1, axis=1)
    else:
        idx = np.argmax(counts, axis=1)
    return LabelSequence(values[idx].astype(np.int64), rate)


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns prediction; index ``k`` holds task ``k + 1``."""

    counts: np.ndarray
    excluded: int = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.excluded + other.excluded)

    def largest_off_diagonal(self) -> tuple[int, int, int]:
        """``(true task, predicted task, count)`` of the heaviest off-diagonal cell."""
        off = self.counts.copy()
        np.fill_diagonal(off, -1)
        g, p = np.unravel_index(np.argmax(off), off.shape)
        return int(g) + 1, int(p) + 1, int(self.counts[g, p])


def confusion(G, P, num_tasks: int = NUM_TASKS) -> ConfusionMatrix:
    g, p = _labels(G), _labels(P)
    if len(g) != len(p):
        raise ValueError(f"length mismatch: ground truth {len(g)}, prediction {len(p)}")
    keep = (g > 0) & (p > 0)
    counts = np.bincount((g[keep] - 1) * num_tasks + (p[keep] - 1), minlength=num_tasks * num_tasks)
    cm = ConfusionMatrix(counts.reshape(num_tasks, num_tasks).astype(np.int64), int(len(g) - keep.sum()))
    if cm.total == 0:
        warnings.warn("no labelled samples left after excluding task 0", RuntimeWarning, stacklevel=2)
    return cm


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.full(num.shape, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def per_task(cm: ConfusionMatrix) -> dict[str, np.ndarray]:
    """Precision, recall and Jaccard per task; ``nan`` marks an undefined ratio."""
    tp, fp, fn = cm.tp, cm.fp, cm.fn
    return {
        "precision": _ratio(tp, tp + fp),
        "recall": _ratio(tp, tp + fn),
        "jaccard": _ratio(tp, tp + fp + fn),
    }


METRICS = ("precision", "recall", "jaccard")


def _macro(cm: ConfusionMatrix, scores: dict[str, np.ndarray]) -> dict[str, float]:
    present = cm.counts.sum(axis=1) > 0
    out = {}
    for name in METRICS:
        v = scores[name][present]
        v = v[~np.isnan(v)]
        out[name] = float(v.mean()) if len(v) else float("nan")
    return out


@dataclass
class MetricsReport:
    precision: np.ndarray
    recall: np.ndarray
    jaccard: np.ndarray
    confusion: ConfusionMatrix
    per_procedure: list[dict[str, float]]
    mean: dict[str, float]
    std: dict[str, float]
    pooled: dict[str, float]
    undefined: dict[str, list[int]] = field(default_factory=dict)
    procedure_ids: list[str] = field(default_factory=list)


def metrics(G, P, procedure_ids: Sequence[str] | None = None) -> MetricsReport:
    """Per-task and averaged metrics for one or many procedures.

    Per-task vectors come from the confusion matrix pooled over procedures.
    The headline averages macro-average over the tasks present in each
    procedure's ground truth, then take mean and population std across
    procedures. ``pooled`` is the macro-average of the pooled matrix.
    """
    single = isinstance(G, LabelSequence) or (len(G) > 0 and np.isscalar(G[0]))
    Gs, Ps = ([G], [P]) if single else (list(G), list(P))
    if len(Gs) != len(Ps) or not Gs:
        raise ValueError("need matching, non-empty lists of ground truth and predictions")
    total = ConfusionMatrix(np.zeros((NUM_TASKS, NUM_TASKS), dtype=np.int64))
    per_proc = []
    for g, p in zip(Gs, Ps):
        cm = confusion(g, p)
        total = total + cm
        per_proc.append(_macro(cm, per_task(cm)))
    scores = per_task(total)
    mean, std = {}, {}
    for name in METRICS:
        vals = np.array([d[name] for d in per_proc])
        vals = vals[~np.isnan(vals)]
        mean[name] = float(vals.mean()) if len(vals) else float("nan")
        std[name] = float(vals.std()) if len(vals) else float("nan")
    undefined = {name: [int(k) + 1 for k in np.flatnonzero(np.isnan(scores[name]))] for name in METRICS}
    ids = list(procedure_ids) if procedure_ids is not None else [str(i) for i in range(len(Gs))]
    return MetricsReport(scores["precision"], scores["recall"], scores["jaccard"], total, per_proc,
                         mean, std, _macro(total, scores), undefined, ids)


def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else f"{v:.4f}"


def format_report(raw: MetricsReport, filtered: MetricsReport | None = None,
                  task_names: dict[int, str] | None = None) -> str:
    """Tab-separated report; with ``filtered`` every cell reads ``original | filtered``."""
    reports = [raw] if filtered is None else [raw, filtered]

    def cell(get) -> str:
        return " | ".join(get(r) for r in reports)

    lines = [
        "# averaging: per-procedure macro mean over tasks present in ground truth, "
        "then mean and population std across procedures",
        "# undefined ratios (zero denominators) are reported as nan and excluded from averages",
        f"# procedures: {len(raw.per_procedure)}; evaluated samples: {raw.confusion.total}; "
        f"excluded (task 0): {raw.confusion.excluded}",
        "\t".join(["task", "name", *METRICS]),
    ]
    for k in range(NUM_TASKS):
        name = (task_names or {}).get(k + 1, "")
        lines.append("\t".join([str(k + 1), name] + [cell(lambda r, m=m: _fmt(getattr(r, m)[k])) for m in METRICS]))
    lines.append("\t".join(["mean", "across procedures"] +
                           [cell(lambda r, m=m: f"{_fmt(r.mean[m])}±{_fmt(r.std[m])}") for m in METRICS]))
    lines.append("\t".join(["pooled", "all samples"] + [cell(lambda r, m=m: _fmt(r.pooled[m])) for m in METRICS]))
    lines.append("")
    lines.append("# per procedure (" + " | ".join(["original", "filtered"][:len(reports)]) + ")")
    lines.append("\t".join(["procedure", *METRICS]))
    for i, pid in enumerate(raw.procedure_ids):
        lines.append("\t".join([pid] + [cell(lambda r, m=m: _fmt(r.per_procedure[i][m])) for m in METRICS]))
    return "\n".join(lines) + "\n"


def write_report(path, raw: MetricsReport, filtered: MetricsReport | None = None,
                 task_names: dict[int, str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_report(raw, filtered, task_names))
    return path


def sweep_filter(Gs, Ps, lengths: Sequence[int], mode: str = "median") -> list[tuple[int, float]]:
    """Mean procedure Jaccard after filtering with each length in ``lengths``."""
    out = []
    for F in lengths:
        cfg = FilterConfig(F, mode)
        rep = metrics(list(Gs), [median_filter(p, cfg) for p in Ps])
        out.append((int(F), rep.mean["jaccard"]))
    return out
