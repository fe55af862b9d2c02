"""Neural layers on top of :mod:`surgseg.autodiff`.

Recurrent cells and convolutions are single tape nodes with hand-derived
backward rules; this keeps the per-time-step Python overhead low enough to
train on a CPU. Every rule is covered by finite-difference checks in the test
suite.

Shapes follow a batch-first convention: sequences are ``(batch, time, dim)``,
images ``(batch, channels, height, width)`` and clips
``(batch, channels, time, height, width)``. Unbatched inputs are accepted by
the public functions and returned unbatched.
"""

from __future__ import annotations

import zipfile
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import (
    ShapeError,
    Tensor,
    _sigmoid,
    as_tensor,
    concat,
    getitem,
    matmul,
    parameter,
    relu,
    softmax_array,
    stack,
    tanh,
    unstack,
)

CELL_KINDS = ("vanilla", "gru", "lstm")
GATES = {"vanilla": 1, "gru": 3, "lstm": 4}
CHECKPOINT_VERSION = 1


@dataclass
class LayerParams:
    """Named tensors of one layer plus how they were initialised."""

    tensors: dict[str, Tensor]
    init_spec: str = "uniform"
    rng_seed: int | None = None

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def __iter__(self):
        return iter(self.tensors.values())


@dataclass
class SequenceBatch:
    features: np.ndarray | Tensor
    valid_length: int | None = None

    def __post_init__(self):
        t = self.features.shape[-2]
        if self.valid_length is None:
            self.valid_length = t
        if not 0 <= self.valid_length <= t:
            raise ValueError(f"valid_length {self.valid_length} outside [0, {t}]")


# --- initialisation ---------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_dense(rng: np.random.Generator, n_in: int, n_out: int, prefix: str = "") -> LayerParams:
    return LayerParams({
        "W": parameter(glorot_uniform(rng, (n_in, n_out), n_in, n_out), prefix + "W"),
        "b": parameter(np.zeros(n_out), prefix + "b"),
    })


def init_cell(kind: str, rng: np.random.Generator, n_in: int, hidden: int, prefix: str = "") -> LayerParams:
    """Input weights ``Wx (n_in, G*H)``, recurrent ``Wh (H, G*H)`` and one bias per gate.

    Gate order is (i, f, g, o) for LSTM and (z, r, n) for GRU.
    """
    if kind not in GATES:
        raise ValueError(f"unknown cell kind {kind!r}")
    gh = GATES[kind] * hidden
    wx = glorot_uniform(rng, (n_in, gh), n_in, hidden)
    a = 1.0 / np.sqrt(hidden)
    wh = rng.uniform(-a, a, size=(hidden, gh))
    b = np.zeros(gh)
    if kind == "lstm":
        b[hidden:2 * hidden] = 1.0
    return LayerParams({
        "Wx": parameter(wx, prefix + "Wx"),
        "Wh": parameter(wh, prefix + "Wh"),
        "b": parameter(b, prefix + "b"),
    })


def cell_param_count(kind: str, n_in: int, hidden: int) -> int:
    return GATES[kind] * (n_in + hidden + 1) * hidden


# --- dense ------------------------------------------------------------------

ACTIVATIONS = {"linear": lambda t: t, "relu": relu, "tanh": tanh}


def dense(x, params: LayerParams, activation: str = "linear") -> Tensor:
    x = as_tensor(x)
    w = params["W"]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense input dim {x.shape[-1]} != weight input dim {w.shape[0]}")
    return ACTIVATIONS[activation](matmul(x, w) + params["b"])


# --- recurrent cells ----------------------------------------------------------
# The fused step ops take the input already projected through Wx (so a whole
# sequence is projected by one matmul) and carry the recurrent state in one
# tensor: ``h`` for vanilla/GRU and ``[h, c]`` concatenated for LSTM.

def _lstm_fused(xp: Tensor, hc: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    H = wh.shape[0]
    h, c = hc.data[:, :H], hc.data[:, H:]
    z = xp.data + h @ wh.data + b.data
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = _sigmoid(z[:, 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc

    def rule(grad):
        gh, gc = grad[:, :H], grad[:, H:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            gh * tc * o * (1.0 - o),
        ], axis=1)
        dhc = np.concatenate([dz @ wh.data.T, dc * f], axis=1) if hc.requires_grad else None
        return dz, dhc, h.T @ dz, dz.sum(axis=0)

    return Tensor.from_op(np.concatenate([h_new, c_new], axis=1), (xp, hc, wh, b), rule)


def _gru_fused(xp: Tensor, h: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    H = wh.shape[0]
    hp = h.data
    xz = xp.data + b.data
    hz = hp @ wh.data[:, :2 * H]
    z = _sigmoid(xz[:, :H] + hz[:, :H])
    r = _sigmoid(xz[:, H:2 * H] + hz[:, H:])
    rh = r * hp
    n = np.tanh(xz[:, 2 * H:] + rh @ wh.data[:, 2 * H:])
    h_new = (1.0 - z) * n + z * hp

    def rule(grad):
        dn = grad * (1.0 - z) * (1.0 - n * n)
        dzp = grad * (hp - n) * z * (1.0 - z)
        drh = dn @ wh.data[:, 2 * H:].T
        drp = drh * hp * r * (1.0 - r)
        dh_gates = np.concatenate([dzp, drp], axis=1)
        dpre = np.concatenate([dh_gates, dn], axis=1)
        dh = None
        if h.requires_grad:
            dh = grad * z + drh * r + dh_gates @ wh.data[:, :2 * H].T
        dwh = np.concatenate([hp.T @ dh_gates, rh.T @ dn], axis=1)
        return dpre, dh, dwh, dpre.sum(axis=0)

    return Tensor.from_op(h_new, (xp, h, wh, b), rule)


def _vanilla_fused(xp: Tensor, h: Tensor, wh: Tensor, b: Tensor) -> Tensor:
    h_new = np.tanh(xp.data + h.data @ wh.data + b.data)

    def rule(grad):
        dz = grad * (1.0 - h_new * h_new)
        dh = dz @ wh.data.T if h.requires_grad else None
        return dz, dh, h.data.T @ dz, dz.sum(axis=0)

    return Tensor.from_op(h_new, (xp, h, wh, b), rule)


_FUSED = {"lstm": _lstm_fused, "gru": _gru_fused, "vanilla": _vanilla_fused}


def _state_width(kind: str, hidden: int) -> int:
    return 2 * hidden if kind == "lstm" else hidden


def _check_cell(kind: str, x: Tensor, state_dims: list[int], p: LayerParams) -> None:
    wx, wh = p["Wx"], p["Wh"]
    H = wh.shape[0]
    if x.shape[-1] != wx.shape[0]:
        raise ShapeError(f"{kind} input dim {x.shape[-1]} != Wx rows {wx.shape[0]}")
    if any(d != H for d in state_dims):
        raise ShapeError(f"{kind} state dims {state_dims} != hidden size {H}")


def _batched(t) -> tuple[Tensor, bool]:
    t = as_tensor(t)
    if t.ndim == 1:
        return t.reshape(1, -1), True
    return t, False


def _unbatch(t: Tensor, was_vector: bool) -> Tensor:
    return t.reshape(-1) if was_vector else t


def lstm_step(x_t, h_prev, c_prev, params: LayerParams) -> tuple[Tensor, Tensor]:
    """One LSTM step; returns ``(h, c)`` with the same batching as ``x_t``."""
    x, vec = _batched(x_t)
    h, _ = _batched(h_prev)
    c, _ = _batched(c_prev)
    _check_cell("lstm", x, [h.shape[-1], c.shape[-1]], params)
    H = params["Wh"].shape[0]
    hc = _lstm_fused(matmul(x, params["Wx"]), concat([h, c], axis=1), params["Wh"], params["b"])
    return _unbatch(hc[:, :H], vec), _unbatch(hc[:, H:], vec)


def gru_step(x_t, h_prev, params: LayerParams) -> Tensor:
    x, vec = _batched(x_t)
    h, _ = _batched(h_prev)
    _check_cell("gru", x, [h.shape[-1]], params)
    return _unbatch(_gru_fused(matmul(x, params["Wx"]), h, params["Wh"], params["b"]), vec)


def vanilla_step(x_t, h_prev, params: LayerParams) -> Tensor:
    x, vec = _batched(x_t)
    h, _ = _batched(h_prev)
    _check_cell("vanilla", x, [h.shape[-1]], params)
    return _unbatch(_vanilla_fused(matmul(x, params["Wx"]), h, params["Wh"], params["b"]), vec)


def scan(kind: str, x, params: LayerParams, reverse: bool = False, terminal_only: bool = False):
    """Run a cell over ``x`` of shape ``(B, T, D)``.

    Returns the hidden states ``(B, H)`` in time order, or only the state after
    the last processed step when ``terminal_only`` (``t = 0`` when reversed).
    """
    x = as_tensor(x)
    _check_cell(kind, x, [], params)
    wh, b = params["Wh"], params["b"]
    H = wh.shape[0]
    step = _FUSED[kind]
    proj = unstack(matmul(x, params["Wx"]), axis=1)
    state = Tensor(np.zeros((x.shape[0], _state_width(kind, H))))
    T = len(proj)
    order = range(T - 1, -1, -1) if reverse else range(T)
    out: list[Tensor | None] = [None] * T
    for t in order:
        state = step(proj[t], state, wh, b)
        out[t] = state
    if terminal_only:
        return state[:, :H] if kind == "lstm" else state
    if kind == "lstm":
        out = [s[:, :H] for s in out]
    return out


def run_sequence(seq: SequenceBatch | np.ndarray | Tensor, cell: str, params, direction: str = "forward") -> Tensor:
    """Hidden states for every time step: ``(T, H)`` or ``(T, 2H)`` when bidirectional.

    ``params`` is one :class:`LayerParams` for a forward run, or a
    ``(forward, backward)`` pair when bidirectional. Batched input
    ``(B, T, D)`` gives ``(B, T, H*)``.
    """
    if not isinstance(seq, SequenceBatch):
        seq = SequenceBatch(seq)
    x = as_tensor(seq.features)
    if seq.valid_length == 0 or x.shape[-2] == 0:
        raise ValueError("run_sequence needs a non-empty sequence")
    vec = x.ndim == 2
    if vec:
        x = x.reshape(1, *x.shape)
    if seq.valid_length < x.shape[1]:
        x = getitem(x, (slice(None), slice(0, seq.valid_length)))
    if direction == "forward":
        p = params[0] if isinstance(params, (tuple, list)) else params
        hs = scan(cell, x, p)
    elif direction == "bidirectional":
        fwd, bwd = params
        hf = scan(cell, x, fwd)
        hb = scan(cell, x, bwd, reverse=True)
        hs = [concat([a, b], axis=1) for a, b in zip(hf, hb)]
    else:
        raise ValueError(f"unknown direction {direction!r}")
    out = stack(hs, axis=1)
    return out.reshape(out.shape[1:]) if vec else out


# --- convolution ------------------------------------------------------------

def _as_tuple(v, n: int) -> tuple[int, ...]:
    return tuple(v) if isinstance(v, (tuple, list)) else (v,) * n


def _conv(x, kernels, bias, stride, padding, nd: int) -> Tensor:
    x, k = as_tensor(x), as_tensor(kernels)
    vec = x.ndim == nd + 1
    if vec:
        x = x.reshape(1, *x.shape)
    if x.ndim != nd + 2 or k.ndim != nd + 2:
        raise ShapeError(f"conv{nd}d expects input with {nd + 1} or {nd + 2} dims and kernel with {nd + 2}, "
                         f"got {x.shape} and {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv{nd}d channel mismatch: input {x.shape} kernel {k.shape}")
    s = _as_tuple(stride, nd)
    pad = _as_tuple(padding, nd)
    ksz = k.shape[2:]
    padded = [x.shape[2 + d] + 2 * pad[d] for d in range(nd)]
    if any(ksz[d] > padded[d] for d in range(nd)):
        raise ShapeError(f"kernel {ksz} larger than padded input {tuple(padded)}")
    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in pad])
    win = sliding_window_view(xp, ksz, axis=tuple(range(2, 2 + nd)))
    win = win[(slice(None), slice(None)) + tuple(slice(None, None, st) for st in s)]
    out_sp = win.shape[2:2 + nd]
    # win: (N, C, *out, *k); contract C and kernel axes
    red_w = [1] + list(range(2 + nd, 2 + 2 * nd))
    red_k = list(range(1, nd + 2))
    y = np.tensordot(win, k.data, axes=(red_w, red_k))  # (N, *out, K)
    y = np.moveaxis(y, -1, 1)
    parents = [x, k]
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data.reshape((1, -1) + (1,) * nd)
        parents.append(bias)

    def rule(g):
        gk = None
        if k.requires_grad:
            gk = np.tensordot(g, win, axes=([0] + list(range(2, 2 + nd)), [0] + list(range(2, 2 + nd))))
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for off in np.ndindex(*ksz):
                contrib = np.tensordot(g, k.data[(slice(None), slice(None)) + off], axes=([1], [0]))
                sl = tuple(slice(off[d], off[d] + s[d] * (out_sp[d] - 1) + 1, s[d]) for d in range(nd))
                gxp[(slice(None), slice(None)) + sl] += np.moveaxis(contrib, -1, 1)
            crop = tuple(slice(pad[d], pad[d] + x.shape[2 + d]) for d in range(nd))
            gx = gxp[(slice(None), slice(None)) + crop]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0,) + tuple(range(2, 2 + nd))))
        return grads

    out = Tensor.from_op(np.ascontiguousarray(y), parents, rule)
    return out.reshape(out.shape[1:]) if vec else out


def conv2d(x, kernels, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``(N?, C, H, W)`` input with ``(K, C, kh, kw)`` kernels."""
    return _conv(x, kernels, bias, stride, padding, 2)


def conv3d(x, kernels, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``(N?, C, T, H, W)`` input with ``(K, C, kt, kh, kw)`` kernels."""
    return _conv(x, kernels, bias, stride, padding, 3)


def init_conv(rng: np.random.Generator, c_in: int, c_out: int, ksize: tuple[int, ...], prefix: str = "") -> LayerParams:
    rf = int(np.prod(ksize))
    w = glorot_uniform(rng, (c_out, c_in) + tuple(ksize), c_in * rf, c_out * rf)
    return LayerParams({"K": parameter(w, prefix + "K"), "b": parameter(np.zeros(c_out), prefix + "b")})


def max_pool(x, size) -> Tensor:
    """Non-overlapping max pooling over the trailing spatial axes; remainders are cropped."""
    x = as_tensor(x)
    size = tuple(size)
    nd = len(size)
    lead = x.shape[:-nd]
    sp = x.shape[-nd:]
    outs = tuple(n // p for n, p in zip(sp, size))
    if any(o == 0 for o in outs):
        raise ShapeError(f"pool size {size} larger than input {sp}")
    crop = x.data[(...,) + tuple(slice(0, o * p) for o, p in zip(outs, size))]
    split = lead + tuple(v for o, p in zip(outs, size) for v in (o, p))
    blocks = crop.reshape(split)
    axes = tuple(len(lead) + 2 * i + 1 for i in range(nd))
    y = blocks.max(axis=axes)
    mask = blocks == np.expand_dims(y, axes)
    mask = mask / mask.sum(axis=axes, keepdims=True)

    def rule(g):
        full = np.zeros_like(x.data)
        full[(...,) + tuple(slice(0, o * p) for o, p in zip(outs, size))] = (
            mask * np.expand_dims(g, axes)).reshape(crop.shape)
        return (full,)

    return Tensor.from_op(y, (x,), rule)


def global_avg_pool(x, nd: int) -> Tensor:
    x = as_tensor(x)
    return x.mean(axis=tuple(range(x.ndim - nd, x.ndim)))


# --- regularisation and loss ---------------------------------------------------

def dropout(x, p: float, mode: str = "train", rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity (same object) in eval mode or when p == 0."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if mode == "eval" or p == 0:
        return x
    if mode != "train":
        raise ValueError(f"unknown dropout mode {mode!r}")
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch; labels are 0-based."""
    z = as_tensor(logits)
    vec = z.ndim == 1
    zd = z.data[None, :] if vec else z.data
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    K = zd.shape[1]
    if lab.shape[0] != zd.shape[0]:
        raise ShapeError(f"{lab.shape[0]} labels for {zd.shape[0]} rows of logits")
    if np.any(lab < 0) or np.any(lab >= K):
        raise ValueError(f"label out of range [0, {K})")
    shifted = zd - zd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(zd.shape[0])
    loss = float(np.mean(lse - shifted[rows, lab]))
    probs = softmax_array(zd)

    def rule(g):
        d = probs.copy()
        d[rows, lab] -= 1.0
        d *= g / zd.shape[0]
        return (d[0] if vec else d,)

    return Tensor.from_op(np.asarray(loss), (z,), rule)


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write ``{name: array}`` as an uncompressed ``.npz`` with a format version."""
    arrays = {name: np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
              for name, t in params.items()}
    if "__version__" in arrays:
        raise ValueError("'__version__' is reserved")
    with open(path, "wb") as fh:
        np.savez(fh, __version__=np.array(CHECKPOINT_VERSION), **arrays)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        with np.load(path, allow_pickle=False) as z:
            version = int(z["__version__"]) if "__version__" in z.files else None
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {version}")
            return {k: z[k] for k in z.files if k != "__version__"}
    except (zipfile.BadZipFile, OSError) as exc:
        raise ValueError(f"{path}: not a checkpoint file ({exc})") from exc
