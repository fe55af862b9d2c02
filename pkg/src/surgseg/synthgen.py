"""Deterministic synthetic procedures with the structure of the clinical data.

Twelve tasks run back to back with durations drawn around the per-task
mean times of the reference dataset (scaled down for desk use). Each task has
an archetype for every stream: a mean kinematic vector observed through
AR(1) noise, per-code event rates, a backbone-feature prototype and a colour
and texture for rendered frames. Selected task pairs get deliberately close
archetypes so that learned confusions have somewhere to go.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .dataio import (
    NUM_TASKS,
    ProcedureRecording,
    Stream,
    StreamSpec,
    labels_at,
    sample_count,
    write_recording,
)

# task id, name, mean time (s), procedures containing the task (of 100)
TABLE1 = (
    (1, "mobilize colon / drop bladder", 1063.2, 100),
    (2, "Endopelvic fascia", 764.2, 98),
    (3, "Anterior bladder neck dissection", 164.9, 98),
    (4, "Posterior bladder neck dissection", 617.5, 100),
    (5, "Seminal vesicles", 686.8, 100),
    (6, "Posterior plane / Denonvilliers", 171.2, 99),
    (7, "Pedicles / nerve sparing", 510.6, 100),
    (8, "Apical dissection", 401.1, 100),
    (9, "Posterior anastomosis", 403.1, 100),
    (10, "Anterior anastomosis", 539.7, 100),
    (11, "Lymph node dissection Left", 999.6, 100),
    (12, "Lymph node dissection Right", 1103.6, 100),
)
TASK_NAMES = {t: name for t, name, _, _ in TABLE1}

YELLOW = np.array([0.95, 0.85, 0.35])
RED = np.array([0.70, 0.10, 0.10])


@dataclass
class TaskProfile:
    task_id: int
    name: str
    mean_duration_s: float
    presence: float
    duration_jitter: float
    archetypes: dict[str, np.ndarray]
    ar_coef: float
    noise_scale: float
    event_rates: np.ndarray
    prototype: np.ndarray
    frame_color: np.ndarray
    texture: tuple[float, float, float]

    def __post_init__(self):
        if self.mean_duration_s <= 0:
            raise ValueError("task durations must be positive")
        if not 0 <= self.ar_coef < 1:
            raise ValueError("AR coefficient must be in [0, 1)")
        if np.any(self.event_rates < 0):
            raise ValueError("event rates must be non-negative")


@dataclass
class GeneratorConfig:
    n_procedures: int = 10
    rng_seed: int = 0
    task_order: str = "light_shuffle"
    confusable_pairs: tuple[tuple[int, int], ...] = ((9, 10), (3, 4))
    confusable_closeness: float = 0.3
    duration_scale: float = 0.1
    duration_jitter: float = 0.15
    swap_prob: float = 0.1
    omit_tasks: bool = True
    separation: float = 0.3
    noise_scale: float = 1.0
    procedure_offset: float = 0.1
    ar_coef: float = 0.95
    kinematic_rate: float = 50.0
    stream_dims: dict[str, int] = field(default_factory=lambda: {"SSC": 80, "SI": 90, "EVT": 87})
    streams: tuple[str, ...] = ("SSC", "SI", "EVT", "FRAME")
    event_rate: float = 0.5
    signature_codes: int = 6
    frame_rate: float = 1.0
    backbone_dim: int = 2048
    prototype_separation: float = 1.0
    frame_noise: float = 1.0
    images: bool = False
    image_size: int = 32
    image_noise: float = 0.15

    def __post_init__(self):
        self.confusable_pairs = tuple(tuple(p) for p in self.confusable_pairs)
        self.streams = tuple(self.streams)
        self.stream_dims = dict(self.stream_dims)
        if self.n_procedures < 1:
            raise ValueError("n_procedures must be at least 1")
        if self.task_order not in ("fixed", "light_shuffle"):
            raise ValueError(f"unknown task order policy {self.task_order!r}")
        for a, b in self.confusable_pairs:
            if not (1 <= a <= NUM_TASKS and 1 <= b <= NUM_TASKS) or a == b:
                raise ValueError(f"invalid confusable pair ({a}, {b})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusable_pairs"] = [list(p) for p in self.confusable_pairs]
        d["streams"] = list(self.streams)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"version"}
        if unknown:
            raise ValueError(f"unknown generator config fields {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})


def _pull_together(vectors: dict[int, np.ndarray], pairs, closeness: float) -> None:
    for a, b in pairs:
        vectors[b] = vectors[a] + closeness * (vectors[b] - vectors[a])


def make_profiles(config: GeneratorConfig) -> list[TaskProfile]:
    """Per-task archetypes, shared by every procedure generated from ``config``."""
    rng = np.random.default_rng([config.rng_seed, 0x5EED])
    dims = config.stream_dims
    pairs = config.confusable_pairs
    kin = {}
    for name in ("SSC", "SI"):
        vecs = {t: rng.normal(0.0, config.separation, dims[name]) for t in range(1, NUM_TASKS + 1)}
        _pull_together(vecs, pairs, config.confusable_closeness)
        kin[name] = vecs
    protos = {t: rng.normal(0.0, config.prototype_separation, config.backbone_dim) for t in range(1, NUM_TASKS + 1)}
    _pull_together(protos, pairs, config.confusable_closeness)

    n_codes = dims["EVT"]
    per_task = config.event_rate / max(config.signature_codes, 1)
    rates = {}
    for t in range(1, NUM_TASKS + 1):
        r = np.full(n_codes, 0.02 * config.event_rate / n_codes)
        r[rng.choice(n_codes, size=min(config.signature_codes, n_codes), replace=False)] += per_task
        rates[t] = r
    _pull_together(rates, pairs, config.confusable_closeness)

    colors = {t: YELLOW + (RED - YELLOW) * (t - 1) / (NUM_TASKS - 1) for t in range(1, NUM_TASKS + 1)}
    textures = {t: np.array([rng.uniform(1.0, 4.0), rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)])
                for t in range(1, NUM_TASKS + 1)}
    _pull_together(colors, pairs, config.confusable_closeness)
    _pull_together(textures, pairs, config.confusable_closeness)

    return [
        TaskProfile(
            task_id=t, name=name, mean_duration_s=mean_s, presence=count / 100.0,
            duration_jitter=config.duration_jitter,
            archetypes={"SSC": kin["SSC"][t], "SI": kin["SI"][t]},
            ar_coef=config.ar_coef, noise_scale=config.noise_scale,
            event_rates=rates[t], prototype=protos[t],
            frame_color=colors[t], texture=tuple(float(v) for v in textures[t]),
        )
        for t, name, mean_s, count in TABLE1
    ]


def archetype_distance(p: TaskProfile, q: TaskProfile) -> float:
    """Euclidean distance between the kinematic and prototype archetypes of two tasks."""
    a = np.concatenate([p.archetypes["SSC"], p.archetypes["SI"], p.prototype])
    b = np.concatenate([q.archetypes["SSC"], q.archetypes["SI"], q.prototype])
    return float(np.linalg.norm(a - b))


def task_layout(profiles: list[TaskProfile], config: GeneratorConfig,
                rng: np.random.Generator) -> list[tuple[int, float, float]]:
    """Sequential ``(task, start, end)`` intervals for one procedure."""
    order = [p.task_id for p in profiles]
    by_id = {p.task_id: p for p in profiles}
    if config.task_order == "light_shuffle":
        if config.omit_tasks:
            keep = rng.random(len(order)) < np.array([by_id[t].presence for t in order])
            order = [t for t, k in zip(order, keep) if k]
        i = 0
        while i < len(order) - 1:
            if rng.random() < config.swap_prob:
                order[i], order[i + 1] = order[i + 1], order[i]
                i += 2
            else:
                i += 1
    out, t = [], 0.0
    for task in order:
        p = by_id[task]
        d = p.mean_duration_s * config.duration_scale
        if p.duration_jitter:
            d *= 1.0 + p.duration_jitter * rng.uniform(-1.0, 1.0)
        out.append((task, t, t + d))
        t += d
    return out


def _ar1(rng: np.random.Generator, n: int, dim: int, phi: float, sigma: float) -> np.ndarray:
    """Stationary AR(1) noise with marginal standard deviation ``sigma``."""
    eps = rng.standard_normal((n, dim))
    if phi == 0.0:
        return sigma * eps
    x0 = rng.standard_normal((1, dim)) * sigma
    y, _ = lfilter([sigma * np.sqrt(1 - phi * phi)], [1.0, -phi], eps, axis=0, zi=phi * x0)
    return y


def render_images(profiles: list[TaskProfile], labels: np.ndarray, size: int, noise: float,
                  rng: np.random.Generator) -> np.ndarray:
    """``(n, 3, size, size)`` frames: task colour plus a low-frequency texture."""
    by_id = {p.task_id: p for p in profiles}
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.empty((len(labels), 3, size, size), dtype=np.float32)
    for task in np.unique(labels):
        idx = np.flatnonzero(labels == task)
        if task == 0:
            base = np.zeros((3, size, size))
        else:
            p = by_id[int(task)]
            freq, angle, phase = p.texture
            wave = 0.15 * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
            base = p.frame_color[:, None, None] + wave[None]
        out[idx] = base[None] + noise * rng.standard_normal((len(idx), 3, size, size))
    return out


def generate_procedure(profiles: list[TaskProfile], config: GeneratorConfig, index: int) -> ProcedureRecording:
    """Procedure ``index`` of the dataset described by ``config``; bit-reproducible."""
    ids = sorted(p.task_id for p in profiles)
    if ids != list(range(1, NUM_TASKS + 1)):
        missing = sorted(set(range(1, NUM_TASKS + 1)) - set(ids))
        raise ValueError(f"profiles missing for tasks {missing}")
    by_id = {p.task_id: p for p in profiles}
    rng = np.random.default_rng([config.rng_seed, index])
    layout = task_layout(profiles, config, rng)
    duration = layout[-1][2]
    streams: dict[str, Stream] = {}

    for name in ("SSC", "SI"):
        if name not in config.streams:
            continue
        dim = config.stream_dims[name]
        n = sample_count(duration, config.kinematic_rate)
        times = np.arange(n) / config.kinematic_rate
        lab = labels_at(layout, times)
        table = np.zeros((NUM_TASKS + 1, dim))
        for t, p in by_id.items():
            table[t] = p.archetypes[name]
        sigma = profiles[0].noise_scale
        values = table[lab]
        if sigma > 0:
            values += sigma * config.procedure_offset * rng.standard_normal(dim)
            values += _ar1(rng, n, dim, profiles[0].ar_coef, sigma)
        streams[name] = Stream(StreamSpec(name, dim, config.kinematic_rate), times, values)

    ev_t, ev_c = np.zeros(0), np.zeros(0, dtype=np.int64)
    if "EVT" in config.streams:
        ts, cs = [], []
        for task, start, end in layout:
            counts = rng.poisson(by_id[task].event_rates * (end - start))
            codes = np.repeat(np.arange(len(counts)), counts)
            ts.append(rng.uniform(start, end, size=len(codes)))
            cs.append(codes)
        ev_t = np.concatenate(ts)
        ev_c = np.concatenate(cs)
        order = np.argsort(ev_t, kind="stable")
        ev_t, ev_c = ev_t[order], ev_c[order]

    images = None
    if "FRAME" in config.streams:
        n = sample_count(duration, config.frame_rate)
        times = np.arange(n) / config.frame_rate
        lab = labels_at(layout, times)
        table = np.zeros((NUM_TASKS + 1, config.backbone_dim))
        for t, p in by_id.items():
            table[t] = p.prototype
        values = table[lab] + config.frame_noise * rng.standard_normal((n, config.backbone_dim))
        streams["FRAME"] = Stream(StreamSpec("FRAME", config.backbone_dim, config.frame_rate), times, values)
        if config.images:
            images = render_images(profiles, lab, config.image_size, config.image_noise, rng)

    rec = ProcedureRecording(f"P{index:03d}", duration, streams, ev_t, ev_c, config.stream_dims["EVT"],
                             layout, images, has_events="EVT" in config.streams)
    rec.validate()
    return rec


def generation_report(recordings: list[ProcedureRecording], rate: float = 5.0) -> dict:
    occurrences = {t: 0 for t in range(1, NUM_TASKS + 1)}
    samples = {t: 0 for t in range(1, NUM_TASKS + 1)}
    for rec in recordings:
        times = np.arange(sample_count(rec.duration_s, rate)) / rate
        lab = labels_at(rec.labels, times)
        for task, _, _ in rec.labels:
            occurrences[task] += 1
        for t, c in zip(*np.unique(lab[lab > 0], return_counts=True)):
            samples[int(t)] += int(c)
    return {
        "n_procedures": len(recordings),
        "task_occurrences": {str(k): v for k, v in occurrences.items()},
        "task_samples_5hz": {str(k): v for k, v in samples.items()},
        "total_duration_s": float(sum(r.duration_s for r in recordings)),
    }


def generate_dataset(profiles: list[TaskProfile], config: GeneratorConfig, out_dir,
                     compress: bool = False) -> list[Path]:
    """Write ``config.n_procedures`` manifests plus a generation report."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    paths, summaries = [], []
    for i in range(config.n_procedures):
        rec = generate_procedure(profiles, config, i)
        paths.append(write_recording(rec, out, compress=compress))
        rec.streams = {}
        rec.images = None
        summaries.append(rec)
    report = generation_report(summaries)
    report["config"] = config.to_dict()
    (out / "_generation_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return paths


class PrototypeClassifier:
    """Nearest-archetype classifier over one stream.

    Window blocks ``(W, d)`` are averaged over time before matching, frame
    features ``(d,)`` are matched directly.
    """

    def __init__(self, prototypes: dict[int, np.ndarray], stream: str, offset: np.ndarray | None = None,
                 scale: np.ndarray | None = None):
        self.stream = stream
        self.ids = np.array(sorted(prototypes))
        table = np.stack([prototypes[t] for t in self.ids])
        if offset is not None:
            table = (table - offset) / np.maximum(scale, 1e-8)
        self.table = table

    @classmethod
    def from_profiles(cls, profiles: list[TaskProfile], stream: str, norm=None) -> "PrototypeClassifier":
        if stream == "FRAME":
            protos = {p.task_id: p.prototype for p in profiles}
        else:
            protos = {p.task_id: p.archetypes[stream] for p in profiles}
        if norm is not None:
            return cls(protos, stream, norm.mean, norm.std)
        return cls(protos, stream)

    def predict(self, batch: dict[str, np.ndarray]) -> np.ndarray:
        x = np.asarray(batch[self.stream], dtype=np.float64)
        if x.ndim == 3:
            x = x.mean(axis=1)
        d = ((x[:, None, :] - self.table[None]) ** 2).sum(axis=2)
        return self.ids[np.argmin(d, axis=1)]
