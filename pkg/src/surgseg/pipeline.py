"""End-to-end experiment plumbing shared by the CLI and the benchmarks."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .dataio import (
    LabelSequence,
    NormStats,
    PreparedProcedure,
    fit_norm_stats,
    load_recording,
    normalize_procedures,
    prepare_recording,
    split_dataset,
)
from .models import Model
from .segeval import FilterConfig, MetricsReport, metrics, write_report
from .synthgen import GeneratorConfig, TASK_NAMES, generate_procedure, make_profiles
from .training import RunRecord, TrainConfig, build_window_set, segment, train


def generate_prepared(config: GeneratorConfig, profiles=None) -> list[PreparedProcedure]:
    """Generate and prepare procedures in memory; the 50 Hz arrays are dropped as soon as possible."""
    profiles = profiles or make_profiles(config)
    out = []
    for i in range(config.n_procedures):
        out.append(prepare_recording(generate_procedure(profiles, config, i)))
    return out


def load_prepared(manifests: Sequence) -> list[PreparedProcedure]:
    return [prepare_recording(load_recording(m)) for m in manifests]


@dataclass
class Splits:
    train: list[PreparedProcedure]
    val: list[PreparedProcedure]
    test: list[PreparedProcedure]
    norm: dict[str, NormStats] = field(default_factory=dict)


def split_procedures(procs: Sequence[PreparedProcedure], counts: tuple[int, int, int],
                     seed: int = 0, normalize: bool = True) -> Splits:
    """Disjoint train/val/test split, normalised with statistics of the training part only."""
    by_id = {p.procedure_id: p for p in procs}
    tr, va, te = split_dataset(sorted(by_id), counts, seed)
    splits = Splits([by_id[i] for i in tr], [by_id[i] for i in va], [by_id[i] for i in te])
    if normalize and splits.train:
        splits.norm = fit_norm_stats(splits.train)
        normalize_procedures(procs, splits.norm)
    return splits


@dataclass
class Evaluation:
    raw: MetricsReport
    filtered: MetricsReport
    truth: list[LabelSequence]
    raw_seqs: list[LabelSequence]
    filtered_seqs: list[LabelSequence]


def evaluate(model: Model, procs: Sequence[PreparedProcedure], filter_cfg: FilterConfig) -> Evaluation:
    truth, raws, filts = [], [], []
    for p in procs:
        raw, filt = segment(model, p, filter_cfg)
        truth.append(p.labels)
        raws.append(raw)
        filts.append(filt)
    ids = [p.procedure_id for p in procs]
    return Evaluation(metrics(truth, raws, ids), metrics(truth, filts, ids), truth, raws, filts)


@dataclass
class ExperimentResult:
    model: Model
    record: RunRecord
    evaluation: Evaluation
    splits: Splits


def run_experiment(gen_cfg: GeneratorConfig, train_cfg: TrainConfig, filter_cfg: FilterConfig,
                   counts: tuple[int, int, int], split_seed: int = 0, report_path=None,
                   procs: Sequence[PreparedProcedure] | None = None) -> ExperimentResult:
    """Generate, split, train, segment the test procedures and score them."""
    procs = list(procs) if procs is not None else generate_prepared(gen_cfg)
    splits = split_procedures(procs, counts, split_seed)
    tr = build_window_set(splits.train, train_cfg.model)
    va = build_window_set(splits.val, train_cfg.model)
    model, record = train(train_cfg, tr, va)
    ev = evaluate(model, splits.test, filter_cfg)
    if report_path is not None:
        write_report(Path(report_path), ev.raw, ev.filtered, TASK_NAMES)
    return ExperimentResult(model, record, ev, splits)
