"""Training loop, optimizers, grid search and sequence segmentation."""

from __future__ import annotations

import hashlib
import itertools
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import layers as L
from .autodiff import backward
from .dataio import LabelSequence, PreparedProcedure, Window, make_frame_windows, make_windows
from .models import RNN_KINDS, Model, ModelConfig, build_model
from .segeval import FilterConfig, assemble_sequence, median_filter

OPTIMIZERS = ("sgd", "sgd_momentum", "adam")
TRAIN_CONFIG_VERSION = 1


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    pass


class StreamMismatchError(ValueError):
    pass


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: str = "sgd_momentum"
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    early_stop_patience: int = 5
    rng_seed: int = 0
    clip_norm: float | None = 5.0
    adam_betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.adam_betas = tuple(self.adam_betas)

    def validate(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        # lr = 0 is allowed: it is the frozen-parameter baseline
        if not self.learning_rate >= 0:
            raise ValueError(f"learning rate must be non-negative, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.early_stop_patience < 1:
            raise ValueError("early-stop patience must be at least 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or null")
        self.model.validate()

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        d["adam_betas"] = list(self.adam_betas)
        d["model"] = self.model.to_dict()
        d["version"] = TRAIN_CONFIG_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"version"}
        if unknown:
            raise ValueError(f"unknown train config fields {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    def config_hash(self) -> str:
        return hashlib.sha256(_canonical(self.to_dict()).encode()).hexdigest()[:16]


# --- optimizers -----------------------------------------------------------------

class Optimizer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.state: dict[int, dict[str, np.ndarray]] = {}
        self.t = 0

    def step(self, params: Sequence, grads: dict) -> None:
        self.t += 1
        lr = self.cfg.learning_rate
        for i, p in enumerate(params):
            g = grads[p]
            kind = self.cfg.optimizer
            if kind == "sgd":
                p.data -= lr * g
            elif kind == "sgd_momentum":
                s = self.state.setdefault(i, {"v": np.zeros_like(p.data)})
                s["v"] *= self.cfg.momentum
                s["v"] += g
                p.data -= lr * s["v"]
            else:
                b1, b2 = self.cfg.adam_betas
                s = self.state.setdefault(i, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
                s["m"] *= b1
                s["m"] += (1 - b1) * g
                s["v"] *= b2
                s["v"] += (1 - b2) * g * g
                mhat = s["m"] / (1 - b1 ** self.t)
                vhat = s["v"] / (1 - b2 ** self.t)
                p.data -= lr * mhat / (np.sqrt(vhat) + 1e-8)


def clip_gradients(grads: dict, max_norm: float | None) -> float:
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# --- window sets ----------------------------------------------------------------

@dataclass
class WindowSet:
    """Stacked window blocks ``{name: (n, ...)}`` with 1-based labels.

    Blocks are stored as float32 to halve memory; models upcast each batch.
    """

    blocks: dict[str, np.ndarray]
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> dict[str, np.ndarray]:
        return {k: v[idx] for k, v in self.blocks.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.blocks):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.blocks[k]).tobytes())
        h.update(self.labels.astype(np.int64).tobytes())
        return h.hexdigest()[:16]


def stack_windows(windows: Sequence[Window], keys: Sequence[str] | None = None) -> WindowSet:
    if not windows:
        return WindowSet({}, np.zeros(0, dtype=np.int64))
    keys = list(keys or windows[0].blocks)
    blocks = {k: np.stack([np.asarray(w.blocks[k], dtype=np.float32) for w in windows]) for k in keys}
    return WindowSet(blocks, np.array([w.label for w in windows], dtype=np.int64))


def window_inputs(cfg: ModelConfig) -> tuple[str, ...]:
    if cfg.kind in RNN_KINDS:
        return tuple(cfg.streams)
    if cfg.kind == "rpnet_head":
        return ("FRAME",)
    return ("IMAGE",)


def procedure_windows(proc: PreparedProcedure, cfg: ModelConfig, pad_final: bool = False) -> list[Window]:
    """Windows of ``proc`` in the layout the model kind consumes."""
    if cfg.kind in RNN_KINDS:
        missing = [s for s in cfg.streams if s != "EVT" and s not in proc.features]
        if missing:
            raise StreamMismatchError(f"{proc.procedure_id}: model needs streams {missing}")
        return make_windows(proc, cfg.window_length, cfg.streams, pad_final=pad_final)
    if proc.frames is None:
        raise StreamMismatchError(f"{proc.procedure_id}: model {cfg.kind} needs the frame stream")
    if cfg.kind == "rpnet_head":
        return make_frame_windows(proc)
    if proc.images is None:
        raise StreamMismatchError(f"{proc.procedure_id}: model {cfg.kind} needs rendered images")
    return make_frame_windows(proc, images=True, clip_length=cfg.clip_length if cfg.kind == "toy_cnn3d" else 0)


def build_window_set(procs: Iterable[PreparedProcedure], cfg: ModelConfig) -> WindowSet:
    windows = [w for p in procs for w in procedure_windows(p, cfg)]
    return stack_windows(windows, window_inputs(cfg))


def predict_labels(model: Model, blocks: dict[str, np.ndarray], batch_size: int = 256) -> np.ndarray:
    n = len(next(iter(blocks.values())))
    out = np.empty(n, dtype=np.int64)
    for i in range(0, n, batch_size):
        out[i:i + batch_size] = model.predict({k: v[i:i + batch_size] for k, v in blocks.items()})
    return out


def accuracy(model: Model, data: WindowSet) -> float:
    return float(np.mean(predict_labels(model, data.blocks) == data.labels))


# --- training -------------------------------------------------------------------

@dataclass
class RunRecord:
    config_hash: str
    config: dict
    rng_seed: int
    epoch_losses: list[float]
    val_accuracies: list[float]
    best_val_accuracy: float
    best_epoch: int
    num_parameters: int
    wall_clock_s: float
    train_digest: str = ""
    val_digest: str = ""
    artifacts: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


def append_record(path, record: RunRecord) -> None:
    """Append one JSON line with a single ``write`` on an ``O_APPEND`` descriptor."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    line = (json.dumps(record.to_dict(), sort_keys=True) + "\n").encode()
    fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        os.write(fd, line)
    finally:
        os.close(fd)


def read_records(path) -> list[RunRecord]:
    with open(path) as fh:
        return [RunRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def train(cfg: TrainConfig, train_set: WindowSet, val_set: WindowSet, out_dir=None,
          log_path=None, verbose: bool = False) -> tuple[Model, RunRecord]:
    """Minibatch training on softmax cross-entropy, keeping the best-validation weights."""
    cfg.validate()
    if len(train_set) == 0:
        raise TrainingError("training split is empty")
    if len(val_set) == 0:
        raise TrainingError("validation split is empty")
    t0 = time.perf_counter()
    model = build_model(cfg.model)
    params = model.parameters()
    opt = Optimizer(cfg)
    rng = np.random.default_rng(cfg.rng_seed)
    n = len(train_set)
    best_acc, best_epoch, best_state = -1.0, -1, None
    losses, accs = [], []
    stale = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b in range(0, n, cfg.batch_size):
            idx = np.sort(order[b:b + cfg.batch_size])
            logits = model.forward(train_set.take(idx), train=True, rng=rng)
            loss = L.softmax_cross_entropy(logits, train_set.labels[idx] - 1)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at epoch {epoch}, batch {b // cfg.batch_size} "
                                      f"(lr={cfg.learning_rate}, optimizer={cfg.optimizer})")
            grads = backward(loss, params)
            clip_gradients(grads, cfg.clip_norm)
            opt.step(params, grads)
            total += value * len(idx)
        losses.append(total / n)
        acc = accuracy(model, val_set)
        accs.append(acc)
        if verbose:
            print(f"epoch {epoch + 1:3d}  loss {losses[-1]:.4f}  val acc {acc:.4f}", flush=True)
        if acc > best_acc:
            best_acc, best_epoch, stale = acc, epoch, 0
            best_state = model.state_dict()
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    model.load_state_dict(best_state)
    record = RunRecord(cfg.config_hash(), cfg.to_dict(), cfg.rng_seed, losses, accs, best_acc, best_epoch,
                       model.num_parameters(), time.perf_counter() - t0, train_set.digest(), val_set.digest())
    if out_dir is not None:
        from .models import save_model
        paths = save_model(model, Path(out_dir) / record.config_hash)
        record.artifacts = {"config": str(paths[0]), "checkpoint": str(paths[1])}
    if log_path is not None:
        append_record(log_path, record)
    return model, record


def replay(record: RunRecord, train_set: WindowSet, val_set: WindowSet) -> RunRecord:
    """Re-run the training described by ``record``; raises if the data differ."""
    if record.train_digest and record.train_digest != train_set.digest():
        raise TrainingError("training data differ from the recorded run")
    if record.val_digest and record.val_digest != val_set.digest():
        raise TrainingError("validation data differ from the recorded run")
    _, again = train(TrainConfig.from_dict(record.config), train_set, val_set)
    return again


# --- grid search ----------------------------------------------------------------

@dataclass
class GridSpec:
    layers: tuple[int, ...] = (1, 2)
    cells: tuple[str, ...] = ("vanilla", "gru", "lstm")
    units: tuple[int, ...] = (8, 16, 32, 64, 128, 256, 512, 1024)
    dropout: tuple[float, ...] = (0.0, 0.2, 0.5)
    directions: tuple[str, ...] = ("forward", "bidirectional")
    learning_rates: tuple[float, ...] = ()

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, tuple(getattr(self, f.name)))
        for f in fields(self):
            if f.name != "learning_rates" and not getattr(self, f.name):
                raise ValueError(f"grid axis {f.name!r} is empty")

    def size(self) -> int:
        return len(self.layers) * len(self.cells) * len(self.units) * len(self.dropout) * \
            len(self.directions) * max(len(self.learning_rates), 1)

    def configs(self, base: TrainConfig) -> list[TrainConfig]:
        lrs = self.learning_rates or (base.learning_rate,)
        out = []
        for nl, cell, h, p, d, lr in itertools.product(self.layers, self.cells, self.units, self.dropout,
                                                        self.directions, lrs):
            m = replace(base.model, num_layers=nl, cell=cell, hidden_units=h, dropout=p, direction=d)
            cfg = replace(base, model=m, learning_rate=lr)
            out.append(cfg)
        return out

    def to_dict(self) -> dict:
        return {f.name: list(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"version"}
        if unknown:
            raise ValueError(f"unknown grid fields {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})


def derive_seed(master: int, cfg: TrainConfig) -> int:
    """Seed depending only on the master seed and the configuration, not its grid position."""
    probe = replace(cfg, rng_seed=0, model=replace(cfg.model, rng_seed=0))
    digest = hashlib.sha256(f"{master}:{probe.config_hash()}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _run_one(args) -> RunRecord:
    cfg, train_set, val_set = args
    _, rec = train(cfg, train_set, val_set)
    return rec


def rank_records(records: Sequence[RunRecord]) -> list[RunRecord]:
    return sorted(records, key=lambda r: (-r.best_val_accuracy, r.num_parameters, r.config_hash))


def grid_search(grid: GridSpec, base: TrainConfig, train_set: WindowSet, val_set: WindowSet,
                subsample: int | None = None, workers: int = 1, log_path=None) -> tuple[TrainConfig, list[RunRecord]]:
    """Train every grid point and return the best configuration with all run records."""
    configs = grid.configs(base)
    if subsample is not None and subsample < len(configs):
        pick = np.random.default_rng(base.rng_seed).choice(len(configs), size=subsample, replace=False)
        configs = [configs[i] for i in sorted(pick)]
    seeded = []
    for cfg in configs:
        s = derive_seed(base.rng_seed, cfg)
        seeded.append(replace(cfg, rng_seed=s, model=replace(cfg.model, rng_seed=s)))
    jobs = [(c, train_set, val_set) for c in seeded]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_one, jobs))
    else:
        records = [_run_one(j) for j in jobs]
    if log_path is not None:
        for r in records:
            append_record(log_path, r)
    best = rank_records(records)[0]
    return TrainConfig.from_dict(best.config), records


# --- segmentation ---------------------------------------------------------------

def segment(model: Model, proc: PreparedProcedure, filter_cfg: FilterConfig = FilterConfig(),
            batch_size: int = 256) -> tuple[LabelSequence, LabelSequence]:
    """Raw and filtered per-sample predictions over the whole procedure."""
    cfg = model.config
    windows = procedure_windows(proc, cfg, pad_final=True)
    stacked = stack_windows(windows, window_inputs(cfg))
    preds = predict_labels(model, stacked.blocks, batch_size)
    N = proc.n_samples
    if cfg.kind in RNN_KINDS:
        W = cfg.window_length
    else:
        W = int(round(proc.rate / proc.frame_rate)) * (cfg.clip_length if cfg.kind == "toy_cnn3d" else 1)
    raw = assemble_sequence([(w.start_index, int(p)) for w, p in zip(windows, preds)], W, N, proc.rate)
    return raw, median_filter(raw, filter_cfg)
