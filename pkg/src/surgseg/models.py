"""Window classifiers: single/multi-stream RNNs, the FC head over backbone
features, and small 2D/3D CNNs standing in for the image models.

All models take a batch as a dict of numpy arrays keyed by stream name and
produce logits over the task classes. Class index ``k`` is task id ``k + 1``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import layers as L
from .autodiff import ShapeError, Tensor, concat, softmax_array

KINDS = ("ss_rnn", "ms_rnn", "rpnet_head", "toy_cnn2d", "toy_cnn3d")
RNN_KINDS = ("ss_rnn", "ms_rnn")
RNN_STREAMS = ("SSC", "SI", "EVT")
PAPER_STREAM_DIMS = {"SSC": 80, "SI": 90, "EVT": 87}
CONFIG_VERSION = 1

# stand-in sizes; the original head's unit counts are not recoverable
DEFAULT_RPNET_FC = (1024, 512)


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    kind: str = "ss_rnn"
    streams: tuple[str, ...] = ("SSC", "SI", "EVT")
    cell: str = "lstm"
    hidden_units: int = 256
    num_layers: int = 1
    direction: str = "bidirectional"
    dropout: float = 0.2
    fc_sizes: tuple[int, ...] | None = None
    num_classes: int = 12
    window_length: int = 200
    rng_seed: int = 0
    readout: str = "terminal"
    stream_dims: dict[str, int] = field(default_factory=lambda: dict(PAPER_STREAM_DIMS))
    backbone_dim: int = 2048
    in_channels: int = 3
    image_size: int = 32
    clip_length: int = 16
    conv_channels: tuple[int, ...] = (8, 16)

    def __post_init__(self):
        self.streams = tuple(self.streams)
        self.conv_channels = tuple(self.conv_channels)
        if self.fc_sizes is None:
            self.fc_sizes = DEFAULT_RPNET_FC if self.kind in ("rpnet_head", "toy_cnn2d", "toy_cnn3d") else ()
        self.fc_sizes = tuple(self.fc_sizes)
        self.stream_dims = dict(self.stream_dims)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.kind in RNN_KINDS:
            if not self.streams:
                raise ConfigError(f"{self.kind} needs at least one stream")
            if self.kind == "ms_rnn" and len(self.streams) < 2:
                raise ConfigError(f"ms_rnn needs at least two streams, got {list(self.streams)}")
            if len(set(self.streams)) != len(self.streams):
                raise ConfigError(f"duplicate streams {list(self.streams)}")
            for s in self.streams:
                if s not in self.stream_dims:
                    raise ConfigError(f"no input dimension known for stream {s!r}")
            if self.cell not in L.CELL_KINDS:
                raise ConfigError(f"unknown cell {self.cell!r}")
            if self.direction not in ("forward", "bidirectional"):
                raise ConfigError(f"unknown direction {self.direction!r}")
            if self.readout not in ("terminal", "mean"):
                raise ConfigError(f"unknown readout {self.readout!r}")
            if self.hidden_units < 1 or self.num_layers < 1 or self.window_length < 1:
                raise ConfigError("hidden_units, num_layers and window_length must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if any(n < 1 for n in self.fc_sizes):
            raise ConfigError(f"fc sizes must be positive: {self.fc_sizes}")
        if self.kind in ("toy_cnn2d", "toy_cnn3d"):
            if not 1 <= len(self.conv_channels) <= 3:
                raise ConfigError("toy CNNs have one to three conv blocks")
            if self.image_size % (2 ** len(self.conv_channels)):
                raise ConfigError("image_size must be divisible by 2 per conv block")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["streams"] = list(self.streams)
        d["fc_sizes"] = list(self.fc_sizes)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"version"}
        if unknown:
            raise ConfigError(f"unknown model config fields {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    @property
    def rnn_input_dim(self) -> int:
        return sum(self.stream_dims[s] for s in self.streams)


class Model:
    """Parameters plus the forward pass for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    # --- parameter access ---
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ShapeError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]

    def _layer(self, prefix: str, keys=("W", "b")) -> L.LayerParams:
        return L.LayerParams({k: self.params[f"{prefix}/{k}"] for k in keys})

    # --- forward ---
    def forward(self, batch: dict[str, np.ndarray], train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """Logits ``(B, num_classes)`` for a batched input dict."""
        kind = self.config.kind
        if kind == "ss_rnn":
            feats = self._rnn_features("ss", self._concat_streams(batch), train, rng)
        elif kind == "ms_rnn":
            parts = []
            for s in self.config.streams:
                if s not in batch:
                    raise ShapeError(f"missing stream block {s!r}")
                x = np.asarray(batch[s], dtype=np.float64)
                self._check_window(s, x, self.config.stream_dims[s])
                parts.append(self._rnn_features(f"ms/{s}", x, train, rng))
            feats = concat(parts, axis=1)
        elif kind == "rpnet_head":
            x = np.asarray(batch["FRAME"], dtype=np.float64)
            if x.ndim != 2 or x.shape[1] != self.config.backbone_dim:
                raise ShapeError(f"backbone feature dim {x.shape[-1]} != {self.config.backbone_dim}")
            feats = Tensor(x)
        else:
            feats = self._cnn_features(batch["IMAGE"])
        return self._head(feats, train, rng)

    def predict_proba(self, batch: dict[str, np.ndarray]) -> np.ndarray:
        return softmax_array(self.forward(batch).data)

    def predict(self, batch: dict[str, np.ndarray]) -> np.ndarray:
        """Task ids (1-based) of the most probable class."""
        return np.argmax(self.forward(batch).data, axis=1) + 1

    def _check_window(self, name: str, x: np.ndarray, dim: int) -> None:
        if x.ndim != 3:
            raise ShapeError(f"{name}: expected (batch, time, dim), got {x.shape}")
        if x.shape[2] != dim:
            raise ShapeError(f"{name}: feature dim {x.shape[2]} != expected {dim}")
        if x.shape[1] != self.config.window_length:
            raise ShapeError(f"{name}: window length {x.shape[1]} != {self.config.window_length}")

    def _concat_streams(self, batch) -> np.ndarray:
        if "concat" in batch:
            x = np.asarray(batch["concat"], dtype=np.float64)
        else:
            missing = [s for s in self.config.streams if s not in batch]
            if missing:
                raise ShapeError(f"missing stream blocks {missing}")
            x = np.concatenate([np.asarray(batch[s], dtype=np.float64) for s in self.config.streams], axis=2)
        self._check_window("ss_rnn input", x, self.config.rnn_input_dim)
        return x

    def _rnn_features(self, prefix: str, x, train: bool, rng) -> Tensor:
        cfg = self.config
        bi = cfg.direction == "bidirectional"
        seq = x
        for layer in range(cfg.num_layers):
            fwd = self._layer(f"{prefix}/l{layer}/fwd", ("Wx", "Wh", "b"))
            last = layer == cfg.num_layers - 1
            if last and cfg.readout == "terminal":
                outs = [L.scan(cfg.cell, seq, fwd, terminal_only=True)]
                if bi:
                    bwd = self._layer(f"{prefix}/l{layer}/bwd", ("Wx", "Wh", "b"))
                    outs.append(L.scan(cfg.cell, seq, bwd, reverse=True, terminal_only=True))
                out = concat(outs, axis=1) if bi else outs[0]
            else:
                params = (fwd, self._layer(f"{prefix}/l{layer}/bwd", ("Wx", "Wh", "b"))) if bi else fwd
                out = L.run_sequence(seq, cfg.cell, params, cfg.direction)
                if last:
                    out = out.mean(axis=1)
            out = L.dropout(out, cfg.dropout, "train" if train else "eval", rng)
            seq = out
        return seq

    def _cnn_features(self, images) -> Tensor:
        cfg = self.config
        x = np.asarray(images, dtype=np.float64)
        three_d = cfg.kind == "toy_cnn3d"
        s = cfg.image_size
        want = (cfg.in_channels, cfg.clip_length, s, s) if three_d else (cfg.in_channels, s, s)
        if x.shape[1:] != want:
            raise ShapeError(f"{cfg.kind} input shape {x.shape[1:]} != {want}")
        h: Tensor | np.ndarray = x
        conv = L.conv3d if three_d else L.conv2d
        pool = (2, 2, 2) if three_d else (2, 2)
        for i in range(len(cfg.conv_channels)):
            p = self._layer(f"conv{i}", ("K", "b"))
            h = L.max_pool(L.relu(conv(h, p["K"], p["b"], padding=1)), pool)
        return L.global_avg_pool(h, 3 if three_d else 2)

    def _head(self, feats: Tensor, train: bool, rng) -> Tensor:
        cfg = self.config
        mode = "train" if train else "eval"
        h = feats
        for i in range(len(cfg.fc_sizes)):
            h = L.dense(h, self._layer(f"fc{i}"), "relu")
            h = L.dropout(h, cfg.dropout, mode, rng)
        return L.dense(h, self._layer("out"))


def _head_input_dim(cfg: ModelConfig) -> int:
    if cfg.kind in RNN_KINDS:
        width = cfg.hidden_units * (2 if cfg.direction == "bidirectional" else 1)
        return width * (len(cfg.streams) if cfg.kind == "ms_rnn" else 1)
    if cfg.kind == "rpnet_head":
        return cfg.backbone_dim
    return cfg.conv_channels[-1]


def build_model(config: ModelConfig) -> Model:
    """Initialise a model deterministically from ``config.rng_seed``."""
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    params: dict[str, Tensor] = {}

    def add(prefix: str, lp: L.LayerParams):
        for k, t in lp.tensors.items():
            t.name = f"{prefix}/{k}"
            params[t.name] = t

    if config.kind in RNN_KINDS:
        dirs = ("fwd", "bwd") if config.direction == "bidirectional" else ("fwd",)
        groups = [("ss", config.rnn_input_dim)] if config.kind == "ss_rnn" else \
            [(f"ms/{s}", config.stream_dims[s]) for s in config.streams]
        for prefix, n_in in groups:
            for layer in range(config.num_layers):
                for d in dirs:
                    add(f"{prefix}/l{layer}/{d}", L.init_cell(config.cell, rng, n_in, config.hidden_units))
                n_in = config.hidden_units * len(dirs)
    elif config.kind in ("toy_cnn2d", "toy_cnn3d"):
        k = (3, 3, 3) if config.kind == "toy_cnn3d" else (3, 3)
        c_in = config.in_channels
        for i, c_out in enumerate(config.conv_channels):
            add(f"conv{i}", L.init_conv(rng, c_in, c_out, k))
            c_in = c_out
    n_in = _head_input_dim(config)
    for i, n in enumerate(config.fc_sizes):
        add(f"fc{i}", L.init_dense(rng, n_in, n))
        n_in = n
    add("out", L.init_dense(rng, n_in, config.num_classes))
    return Model(config, params)


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count, independent of :func:`build_model`."""
    total = 0
    if config.kind in RNN_KINDS:
        ndir = 2 if config.direction == "bidirectional" else 1
        ins = [config.rnn_input_dim] if config.kind == "ss_rnn" else [config.stream_dims[s] for s in config.streams]
        for n_in in ins:
            for layer in range(config.num_layers):
                d = n_in if layer == 0 else config.hidden_units * ndir
                total += ndir * L.cell_param_count(config.cell, d, config.hidden_units)
    elif config.kind in ("toy_cnn2d", "toy_cnn3d"):
        rf = 27 if config.kind == "toy_cnn3d" else 9
        c_in = config.in_channels
        for c in config.conv_channels:
            total += c * c_in * rf + c
            c_in = c
    n_in = _head_input_dim(config)
    for n in list(config.fc_sizes) + [config.num_classes]:
        total += (n_in + 1) * n
        n_in = n
    return total


# --- per-kind forward helpers (single example or batch) ------------------------

def _as_batch(x: np.ndarray, single_ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == single_ndim else (x, False)


def _finish(model: Model, batch, single: bool) -> np.ndarray:
    p = model.predict_proba(batch)
    return p[0] if single else p


def ss_rnn_forward(model: Model, window: np.ndarray) -> np.ndarray:
    """Class distribution for a concatenated ``(W, D)`` window (or a batch of them)."""
    if model.config.kind != "ss_rnn":
        raise ConfigError(f"ss_rnn_forward on a {model.config.kind} model")
    x, single = _as_batch(window, 2)
    return _finish(model, {"concat": x}, single)


def ms_rnn_forward(model: Model, windows) -> np.ndarray:
    """``windows`` maps stream name to its ``(W, D_s)`` block, or is a list in config order."""
    if model.config.kind != "ms_rnn":
        raise ConfigError(f"ms_rnn_forward on a {model.config.kind} model")
    if not isinstance(windows, dict):
        windows = list(windows)
        if len(windows) != len(model.config.streams):
            raise ShapeError(f"expected {len(model.config.streams)} stream blocks, got {len(windows)}")
        windows = dict(zip(model.config.streams, windows))
    first = np.asarray(next(iter(windows.values())))
    single = first.ndim == 2
    batch = {k: (np.asarray(v, dtype=np.float64)[None] if single else v) for k, v in windows.items()}
    return _finish(model, batch, single)


def rpnet_head_forward(model: Model, backbone_feature: np.ndarray) -> np.ndarray:
    if model.config.kind != "rpnet_head":
        raise ConfigError(f"rpnet_head_forward on a {model.config.kind} model")
    x, single = _as_batch(backbone_feature, 1)
    return _finish(model, {"FRAME": x}, single)


def toy_cnn_forward(model: Model, image: np.ndarray) -> np.ndarray:
    """Image ``(C, H, W)`` for the 2D model, clip ``(C, T, H, W)`` for the 3D one."""
    if model.config.kind not in ("toy_cnn2d", "toy_cnn3d"):
        raise ConfigError(f"toy_cnn_forward on a {model.config.kind} model")
    x, single = _as_batch(image, 4 if model.config.kind == "toy_cnn3d" else 3)
    return _finish(model, {"IMAGE": x}, single)


# --- persistence ---------------------------------------------------------------

def save_model(model: Model, directory) -> tuple[Path, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cfg_path, ckpt_path = d / "model.json", d / "model.npz"
    cfg_path.write_text(json.dumps({"version": CONFIG_VERSION, **model.config.to_dict()}, indent=2, sort_keys=True))
    L.save_checkpoint(ckpt_path, model.params)
    return cfg_path, ckpt_path


def load_model(directory) -> Model:
    d = Path(directory)
    raw = json.loads((d / "model.json").read_text())
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"unsupported model config version {raw.get('version')}")
    model = build_model(ModelConfig.from_dict(raw))
    model.load_state_dict(L.load_checkpoint(d / "model.npz"))
    return model
