"""Recording schema, manifest I/O, preprocessing and windowing.

On disk a procedure is one JSON manifest plus comma-separated stream files
with a header row:

* kinematic/frame streams: ``timestamp_s,f0,...,f{dim-1}``
* events: ``timestamp_s,code``
* labels: ``task_id,start_s,end_s``

Paths in a manifest are relative to the manifest's directory. Stream files
may be gzip-compressed (``.csv.gz``).
"""

from __future__ import annotations

import csv
import gzip
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MANIFEST_VERSION = 1
NUM_TASKS = 12
KINEMATIC_STREAMS = ("SSC", "SI")
PAPER_DIMS = {"SSC": 80, "SI": 90, "EVT": 87}
NATIVE_RATES = {"SSC": 50.0, "SI": 50.0, "EVT": None, "FRAME": 1.0}
TIMELINE_RATE = 5.0
STREAM_ORDER = ("SSC", "SI", "EVT", "FRAME")


class DataError(ValueError):
    """Base class for malformed or inconsistent recordings."""


class MissingFileError(DataError, FileNotFoundError):
    pass


class MalformedRowError(DataError):
    def __init__(self, path, line: int, detail: str):
        super().__init__(f"{path}:{line}: {detail}")
        self.path = str(path)
        self.line = line


class LabelOrderError(DataError):
    pass


class EventCodeError(DataError):
    pass


@dataclass(frozen=True)
class StreamSpec:
    name: str
    dim: int
    rate: float | None = None

    def __post_init__(self):
        if self.name not in NATIVE_RATES:
            raise DataError(f"unknown stream {self.name!r}")
        if self.dim < 1:
            raise DataError(f"stream {self.name} dim must be positive")

    @classmethod
    def paper(cls, name: str) -> "StreamSpec":
        return cls(name, PAPER_DIMS[name], NATIVE_RATES[name])


@dataclass
class Stream:
    spec: StreamSpec
    timestamps: np.ndarray
    values: np.ndarray


@dataclass
class ProcedureRecording:
    procedure_id: str
    duration_s: float
    streams: dict[str, Stream]
    event_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    event_codes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    event_dim: int = PAPER_DIMS["EVT"]
    labels: list[tuple[int, float, float]] = field(default_factory=list)
    images: np.ndarray | None = None
    has_events: bool = True

    def validate(self) -> None:
        validate_labels(self.labels, self.duration_s, self.procedure_id)
        for name, s in self.streams.items():
            if s.values.ndim != 2 or s.values.shape[1] != s.spec.dim:
                raise DataError(f"{self.procedure_id}/{name}: values shape {s.values.shape} "
                                f"does not match dim {s.spec.dim}")
            if len(s.timestamps) != len(s.values):
                raise DataError(f"{self.procedure_id}/{name}: {len(s.timestamps)} timestamps "
                                f"for {len(s.values)} samples")
            if np.any(np.diff(s.timestamps) < 0):
                raise DataError(f"{self.procedure_id}/{name}: timestamps decrease")
        if np.any(np.diff(self.event_times) < 0):
            raise DataError(f"{self.procedure_id}/EVT: timestamps decrease")
        if self.event_codes.size and (self.event_codes.min() < 0 or self.event_codes.max() >= self.event_dim):
            raise EventCodeError(f"{self.procedure_id}: event code outside [0, {self.event_dim})")

    @property
    def stream_names(self) -> list[str]:
        names = list(self.streams) + (["EVT"] if self.has_events else [])
        return sorted(names, key=STREAM_ORDER.index)


@dataclass
class LabelSequence:
    labels: np.ndarray
    rate: float = TIMELINE_RATE

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise DataError("label sequence must be one-dimensional")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > NUM_TASKS):
            raise DataError(f"labels must lie in 0..{NUM_TASKS}")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Window:
    blocks: dict[str, np.ndarray]
    label: int
    procedure_id: str
    start_index: int
    span: int
    valid: int | None = None


def validate_labels(labels: Sequence[tuple[int, float, float]], duration: float, where: str = "") -> None:
    prev_end = -math.inf
    for task, start, end in labels:
        if not 1 <= task <= NUM_TASKS:
            raise DataError(f"{where}: task id {task} outside 1..{NUM_TASKS}")
        if end <= start:
            raise LabelOrderError(f"{where}: empty or inverted label interval ({start}, {end})")
        if start < prev_end:
            raise LabelOrderError(f"{where}: overlapping/unsorted labels at task {task} start {start}")
        if start < 0 or end > duration + 1e-9:
            raise LabelOrderError(f"{where}: label interval ({start}, {end}) outside recording [0, {duration}]")
        prev_end = end


def labels_at(labels: Sequence[tuple[int, float, float]], times: np.ndarray) -> np.ndarray:
    """Task id active at each time; 0 where no interval covers it."""
    out = np.zeros(len(times), dtype=np.int64)
    for task, start, end in labels:
        lo, hi = np.searchsorted(times, [start, end], side="left")
        out[lo:hi] = task
    return out


def sample_count(duration_s: float, rate: float) -> int:
    """Number of samples at ``t = k / rate`` strictly inside ``[0, duration)``."""
    return int(math.ceil(duration_s * rate - 1e-9))


# --- delimited files ------------------------------------------------------------

def _open_text(path: Path, mode: str = "rt"):
    return gzip.open(path, mode, newline="") if path.suffix == ".gz" else open(path, mode, newline="")


def _locate_bad_row(path: Path, ncols: int) -> MalformedRowError:
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for line, row in enumerate(reader, start=2):
            if len(row) != ncols:
                return MalformedRowError(path, line, f"expected {ncols} columns, found {len(row)}")
            try:
                [float(v) for v in row]
            except ValueError as exc:
                return MalformedRowError(path, line, str(exc))
    return MalformedRowError(path, 0, "unreadable table")


def read_table(path, columns: Sequence[str] | None = None, ncols: int | None = None) -> np.ndarray:
    """Read a headered numeric CSV into a 2-D float array, checking the column count."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing file {path}")
    with _open_text(path) as fh:
        header = fh.readline().strip().split(",")
    if columns is not None and header[:len(columns)] != list(columns):
        raise MalformedRowError(path, 1, f"header {header[:len(columns)]} != {list(columns)}")
    want = ncols if ncols is not None else len(header)
    if len(header) != want:
        raise MalformedRowError(path, 1, f"expected {want} columns, found {len(header)}")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    except ValueError:
        raise _locate_bad_row(path, want) from None
    if data.size == 0:
        return np.zeros((0, want))
    if data.shape[1] != want:
        raise _locate_bad_row(path, want)
    return data


def write_table(path, header: Sequence[str], rows: np.ndarray, fmt: str = "%.6g") -> None:
    path = Path(path)
    rows = np.asarray(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _open_text(path, "wt") as fh:
        fh.write(",".join(header) + "\n")
        if rows.size:
            np.savetxt(fh, rows, delimiter=",", fmt=fmt)


# --- manifests ------------------------------------------------------------------

def _stream_file(name: str) -> str:
    return name.lower()


def write_recording(recording: ProcedureRecording, directory, compress: bool = False) -> Path:
    """Write stream/label files and the manifest; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    pid = recording.procedure_id
    ext = ".csv.gz" if compress else ".csv"
    manifest = {"version": MANIFEST_VERSION, "procedure_id": pid,
                "duration_s": recording.duration_s, "streams": {}}
    for name, s in recording.streams.items():
        fname = f"{pid}_{_stream_file(name)}{ext}"
        header = ["timestamp_s"] + [f"f{i}" for i in range(s.spec.dim)]
        write_table(d / fname, header, np.column_stack([s.timestamps, s.values]))
        manifest["streams"][name] = {"path": fname, "dim": s.spec.dim, "rate_hz": s.spec.rate}
    if recording.has_events:
        fname = f"{pid}_evt{ext}"
        write_table(d / fname, ["timestamp_s", "code"],
                    np.column_stack([recording.event_times, recording.event_codes]), fmt="%.17g")
        manifest["streams"]["EVT"] = {"path": fname, "dim": recording.event_dim, "rate_hz": None}
    fname = f"{pid}_labels.csv"
    write_table(d / fname, ["task_id", "start_s", "end_s"],
                np.array(recording.labels, dtype=np.float64).reshape(-1, 3), fmt="%.17g")
    manifest["labels"] = fname
    if recording.images is not None:
        fname = f"{pid}_images.npy"
        np.save(d / fname, recording.images.astype(np.float32))
        manifest["images"] = fname
    path = d / f"{pid}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_recording(manifest_path) -> ProcedureRecording:
    """Load and validate one procedure from its manifest."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise MissingFileError(f"missing manifest {manifest_path}")
    try:
        m = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedRowError(manifest_path, exc.lineno, f"invalid JSON: {exc.msg}") from None
    if m.get("version") != MANIFEST_VERSION:
        raise DataError(f"{manifest_path}: unsupported manifest version {m.get('version')}")
    for key in ("procedure_id", "duration_s", "streams", "labels"):
        if key not in m:
            raise DataError(f"{manifest_path}: manifest lacks {key!r}")
    base = manifest_path.parent
    pid = m["procedure_id"]
    streams: dict[str, Stream] = {}
    ev_t, ev_c, ev_dim = np.zeros(0), np.zeros(0, dtype=np.int64), PAPER_DIMS["EVT"]
    for name, entry in m["streams"].items():
        path = base / entry["path"]
        if name == "EVT":
            tab = read_table(path, ["timestamp_s", "code"], 2)
            ev_t, ev_c = tab[:, 0], tab[:, 1]
            if np.any(ev_c != np.round(ev_c)):
                raise MalformedRowError(path, 0, "event codes must be integers")
            ev_c = ev_c.astype(np.int64)
            ev_dim = int(entry["dim"])
            continue
        spec = StreamSpec(name, int(entry["dim"]), entry.get("rate_hz"))
        tab = read_table(path, ["timestamp_s"], spec.dim + 1)
        streams[name] = Stream(spec, tab[:, 0].copy(), np.ascontiguousarray(tab[:, 1:]))
    lab = read_table(base / m["labels"], ["task_id", "start_s", "end_s"], 3)
    if np.any(lab[:, 0] != np.round(lab[:, 0])):
        raise MalformedRowError(base / m["labels"], 0, "task ids must be integers")
    labels = [(int(t), float(s), float(e)) for t, s, e in lab]
    images = None
    if "images" in m:
        ipath = base / m["images"]
        if not ipath.is_file():
            raise MissingFileError(f"missing file {ipath}")
        images = np.load(ipath)
    rec = ProcedureRecording(pid, float(m["duration_s"]), streams, ev_t, ev_c, ev_dim, labels, images,
                             has_events="EVT" in m["streams"])
    rec.validate()
    return rec


def find_manifests(directory) -> list[Path]:
    return sorted(p for p in Path(directory).glob("*.json") if not p.name.startswith("_"))


# --- preprocessing -----------------------------------------------------------------

def downsample(values: np.ndarray, factor: int) -> np.ndarray:
    """Keep every ``factor``-th sample starting at index 0."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"downsample factor must be a positive integer, got {factor}")
    return values[::int(factor)]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def compute_norm_stats(arrays: Iterable[np.ndarray]) -> NormStats:
    """Per-dimension mean/std pooled over all samples of the given arrays."""
    arrays = list(arrays)
    n = sum(len(a) for a in arrays)
    if n == 0:
        raise DataError("cannot compute normalisation statistics from no samples")
    mean = sum(a.sum(axis=0) for a in arrays) / n
    var = sum(((a - mean) ** 2).sum(axis=0) for a in arrays) / n
    return NormStats(mean, np.sqrt(var))


def mean_normalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    if values.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"stream dim {values.shape[-1]} != stats dim {stats.mean.shape[0]}")
    return (values - stats.mean) / np.maximum(stats.std, 1e-8)


def encode_events(times: np.ndarray, codes: np.ndarray, t0: float, t1: float, W: int,
                  dim: int = PAPER_DIMS["EVT"]) -> np.ndarray:
    """``W x dim`` occupancy: entry (i, c) is 1 iff an event of code c falls in slot i of ``[t0, t1)``."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= dim):
        raise EventCodeError(f"event code outside [0, {dim})")
    out = np.zeros((W, dim))
    times = np.asarray(times, dtype=np.float64)
    lo, hi = np.searchsorted(times, [t0, t1], side="left")
    if hi > lo:
        slot = np.floor((times[lo:hi] - t0) * W / (t1 - t0)).astype(np.int64)
        np.clip(slot, 0, W - 1, out=slot)
        out[slot, codes[lo:hi]] = 1.0
    return out


@dataclass
class PreparedProcedure:
    """A recording resampled onto the common 5 Hz timeline."""

    procedure_id: str
    features: dict[str, np.ndarray]
    event_times: np.ndarray
    event_codes: np.ndarray
    event_dim: int
    labels: LabelSequence
    frames: np.ndarray | None = None
    frame_labels: np.ndarray | None = None
    images: np.ndarray | None = None
    rate: float = TIMELINE_RATE
    frame_rate: float = 1.0

    @property
    def n_samples(self) -> int:
        return len(self.labels)


def prepare_recording(rec: ProcedureRecording, rate: float = TIMELINE_RATE) -> PreparedProcedure:
    """Downsample kinematics to ``rate`` and derive per-sample labels.

    Kinematic streams must run at an integer multiple of ``rate``. The frame
    stream stays at its own rate in ``frames``, with ``frame_labels`` giving the
    task active at each frame timestamp.
    """
    n = sample_count(rec.duration_s, rate)
    times = np.arange(n) / rate
    feats: dict[str, np.ndarray] = {}
    for name in KINEMATIC_STREAMS:
        if name not in rec.streams:
            continue
        s = rec.streams[name]
        native = s.spec.rate
        factor = native / rate
        if native is None or abs(factor - round(factor)) > 1e-9:
            raise DataError(f"{name} rate {native} Hz is not a multiple of {rate} Hz")
        v = downsample(s.values, int(round(factor)))
        if len(v) < n:
            raise DataError(f"{rec.procedure_id}/{name}: {len(v)} samples after downsampling, need {n}")
        feats[name] = np.ascontiguousarray(v[:n])
    frames = frame_labels = None
    frame_rate = NATIVE_RATES["FRAME"]
    if "FRAME" in rec.streams:
        fs = rec.streams["FRAME"]
        frame_rate = fs.spec.rate or frame_rate
        frames = fs.values
        frame_labels = labels_at(rec.labels, fs.timestamps)
    return PreparedProcedure(
        rec.procedure_id, feats, rec.event_times, rec.event_codes, rec.event_dim,
        LabelSequence(labels_at(rec.labels, times), rate), frames, frame_labels, rec.images, rate, frame_rate)


def normalize_procedures(procs: Sequence[PreparedProcedure], stats: dict[str, NormStats]) -> None:
    """Apply kinematic normalisation in place (replacing the arrays)."""
    for p in procs:
        for name, st in stats.items():
            if name in p.features:
                p.features[name] = mean_normalize(p.features[name], st)


def fit_norm_stats(train: Sequence[PreparedProcedure]) -> dict[str, NormStats]:
    names = [n for n in KINEMATIC_STREAMS if all(n in p.features for p in train)]
    return {n: compute_norm_stats(p.features[n] for p in train) for n in names}


def majority_label(labels: np.ndarray) -> int:
    """Most frequent label; ties go to the smallest task id."""
    return int(np.argmax(np.bincount(labels, minlength=NUM_TASKS + 1)))


def make_windows(proc: PreparedProcedure, W: int, streams: Sequence[str], overlap: int = 0,
                 pad_final: bool = False) -> list[Window]:
    """Consecutive zero-overlap windows of ``W`` samples.

    The trailing remainder is dropped unless ``pad_final``, in which case it
    becomes one more window padded by repeating its last sample.
    """
    if overlap != 0:
        raise ValueError("only zero-overlap windowing is supported")
    N = proc.n_samples
    if W < 1:
        raise ValueError("window length must be positive")
    if W > N:
        raise DataError(f"{proc.procedure_id}: window length {W} exceeds recording length {N}")
    dt = 1.0 / proc.rate
    starts = list(range(0, N - W + 1, W))
    if pad_final and N % W:
        starts.append(starts[-1] + W)
    out = []
    for start in starts:
        stop = min(start + W, N)
        blocks = {}
        for s in streams:
            if s == "EVT":
                blocks[s] = encode_events(proc.event_times, proc.event_codes, start * dt, (start + W) * dt,
                                          W, proc.event_dim)
                continue
            if s not in proc.features:
                raise DataError(f"{proc.procedure_id}: stream {s} not available")
            block = proc.features[s][start:stop]
            if stop - start < W:
                block = np.concatenate([block, np.repeat(block[-1:], W - (stop - start), axis=0)])
            blocks[s] = block
        out.append(Window(blocks, majority_label(proc.labels.labels[start:stop]), proc.procedure_id,
                          start, W, stop - start))
    return out


def make_frame_windows(proc: PreparedProcedure, images: bool = False, clip_length: int = 0) -> list[Window]:
    """One window per frame (or per clip of consecutive frames).

    Each window spans the timeline samples from its first frame up to the next
    window's first frame.
    """
    if proc.frames is None:
        raise DataError(f"{proc.procedure_id}: no frame stream")
    per = proc.rate / proc.frame_rate
    if abs(per - round(per)) > 1e-9:
        raise DataError(f"timeline rate {proc.rate} Hz is not a multiple of frame rate {proc.frame_rate} Hz")
    per = int(round(per))
    step = max(clip_length, 1)
    n_frames = len(proc.frames)
    N = proc.n_samples
    out = []
    for k in range(0, n_frames, step):
        start = k * per
        if start >= N:
            break
        span = min(step * per, N - start)
        if images:
            if proc.images is None:
                raise DataError(f"{proc.procedure_id}: no images")
            if clip_length:
                idx = np.minimum(np.arange(k, k + clip_length), n_frames - 1)
                block = np.moveaxis(proc.images[idx], 0, 1)
            else:
                block = proc.images[k]
            blocks = {"IMAGE": np.asarray(block, dtype=np.float64)}
        else:
            blocks = {"FRAME": proc.frames[k]}
        out.append(Window(blocks, majority_label(proc.labels.labels[start:start + span]), proc.procedure_id,
                          start, span, span))
    return out


def split_dataset(procedure_ids: Sequence[str], counts: tuple[int, int, int] = (70, 10, 20),
                  seed: int = 0) -> tuple[list[str], list[str], list[str]]:
    """Seeded shuffle of procedure ids into disjoint train/val/test lists."""
    ids = list(procedure_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate procedure ids")
    if any(c < 0 for c in counts) or sum(counts) > len(ids):
        raise ValueError(f"split {tuple(counts)} needs {sum(counts)} procedures, only {len(ids)} available")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    a, b, c = counts
    return shuffled[:a], shuffled[a:a + b], shuffled[a + b:a + b + c]
