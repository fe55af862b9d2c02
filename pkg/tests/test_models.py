import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import conv_oracle, lstm_oracle, vanilla_oracle
from surgseg import layers as L
from surgseg.autodiff import ShapeError, Tensor, grad_check
from surgseg.models import (
    ConfigError,
    Model,
    ModelConfig,
    build_model,
    expected_parameter_count,
    load_model,
    ms_rnn_forward,
    rpnet_head_forward,
    save_model,
    ss_rnn_forward,
    toy_cnn_forward,
)


def softmax(z):
    e = [math.exp(v - max(z)) for v in z]
    return [v / sum(e) for v in e]


def tiny(kind, **kw):
    base = dict(kind=kind, hidden_units=2, window_length=3, dropout=0.0, rng_seed=3,
                stream_dims={"SSC": 2, "SI": 3, "EVT": 2}, backbone_dim=3, image_size=4,
                clip_length=2, conv_channels=(2,), in_channels=1)
    if kind == "ss_rnn":
        base["streams"] = ("SSC",)
    if kind == "ms_rnn":
        base["streams"] = ("SSC", "SI")
    if kind in ("rpnet_head", "toy_cnn2d", "toy_cnn3d"):
        base["fc_sizes"] = (4,)
    base.update(kw)
    return ModelConfig(**base)


def randomize(model, seed=0, scale=0.6):
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data[...] = rng.normal(scale=scale, size=p.shape)
    return model


def sample_input(cfg, rng, batch=None, scale=1.0):
    if cfg.kind == "ms_rnn":
        lead = () if batch is None else (batch,)
        return {s: scale * rng.normal(size=lead + (cfg.window_length, cfg.stream_dims[s])) for s in cfg.streams}
    return scale * _sample(cfg, rng, batch)


def _sample(cfg, rng, batch):
    lead = () if batch is None else (batch,)
    if cfg.kind == "ss_rnn":
        return rng.normal(size=lead + (cfg.window_length, cfg.rnn_input_dim))
    if cfg.kind == "rpnet_head":
        return rng.normal(size=lead + (cfg.backbone_dim,))
    shape = (cfg.in_channels, cfg.clip_length, cfg.image_size, cfg.image_size) if cfg.kind == "toy_cnn3d" \
        else (cfg.in_channels, cfg.image_size, cfg.image_size)
    return rng.normal(size=lead + shape)


FORWARD = {"ss_rnn": ss_rnn_forward, "ms_rnn": ms_rnn_forward, "rpnet_head": rpnet_head_forward,
           "toy_cnn2d": toy_cnn_forward, "toy_cnn3d": toy_cnn_forward}
KINDS = list(FORWARD)


def to_batch(cfg, x):
    if cfg.kind == "ss_rnn":
        return {"concat": x}
    if cfg.kind == "ms_rnn":
        return x
    return {"FRAME": x} if cfg.kind == "rpnet_head" else {"IMAGE": x}


# --- build --------------------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_build_is_deterministic(kind):
    a, b = build_model(tiny(kind)), build_model(tiny(kind))
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()


def test_paper_lstm_parameter_count():
    cfg = ModelConfig(kind="ss_rnn", streams=("SSC", "SI"), cell="lstm", hidden_units=256,
                      direction="bidirectional")
    assert cfg.rnn_input_dim == 170
    per_direction = 4 * (170 + 256 + 1) * 256
    head = (2 * 256 + 1) * 12
    assert build_model(cfg).num_parameters() == 2 * per_direction + head == 880652


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("layers", [1, 2])
def test_parameter_count_closed_form(kind, layers):
    cfg = tiny(kind, num_layers=layers, hidden_units=5)
    assert build_model(cfg).num_parameters() == expected_parameter_count(cfg)


def test_invalid_configs():
    with pytest.raises(ConfigError):
        build_model(ModelConfig(kind="ms_rnn", streams=("SSC",)))
    with pytest.raises(ConfigError):
        build_model(ModelConfig(kind="ss_rnn", streams=()))
    with pytest.raises(ConfigError):
        build_model(ModelConfig(kind="ss_rnn", cell="rnn"))
    with pytest.raises(ConfigError):
        build_model(ModelConfig(kind="ss_rnn", dropout=1.0))
    with pytest.raises(ConfigError):
        build_model(ModelConfig(kind="unet"))


def test_default_fc_sizes_by_kind():
    assert ModelConfig(kind="rpnet_head").fc_sizes == (1024, 512)
    assert ModelConfig(kind="ss_rnn").fc_sizes == ()


def test_config_round_trip():
    cfg = tiny("ms_rnn", cell="gru")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})


# --- forward: distributions ------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_outputs_are_distributions(kind):
    cfg = tiny(kind)
    model = randomize(build_model(cfg), 1, 2.0)
    rng = np.random.default_rng(2)
    for _ in range(5):
        p = FORWARD[kind](model, sample_input(cfg, rng, scale=10.0))
        assert p.shape == (12,)
        assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-9


@pytest.mark.parametrize("kind", KINDS)
def test_zero_output_layer_gives_uniform(kind):
    cfg = tiny(kind)
    model = randomize(build_model(cfg))
    model.params["out/W"].data[...] = 0
    model.params["out/b"].data[...] = 0
    p = FORWARD[kind](model, sample_input(cfg, np.random.default_rng(0)))
    np.testing.assert_allclose(p, 1 / 12, atol=1e-15)


def test_toy_cnn_zero_image_zero_bias_uniform():
    for kind in ("toy_cnn2d", "toy_cnn3d"):
        cfg = tiny(kind)
        model = randomize(build_model(cfg))
        for k, p in model.params.items():
            if k.endswith("/b"):
                p.data[...] = 0
        x = sample_input(cfg, np.random.default_rng(0), scale=0.0)
        np.testing.assert_allclose(FORWARD[kind](model, x), 1 / 12, atol=1e-15)


def test_full_size_toy_cnn_shapes():
    for kind, shape in (("toy_cnn2d", (3, 32, 32)), ("toy_cnn3d", (3, 16, 32, 32))):
        model = build_model(ModelConfig(kind=kind, fc_sizes=(16,), conv_channels=(4, 4)))
        assert toy_cnn_forward(model, np.random.default_rng(0).normal(size=shape)).shape == (12,)


def test_ss_rnn_matches_scalar_pipeline():
    cfg = tiny("ss_rnn", cell="lstm", direction="forward")
    model = randomize(build_model(cfg), 4)
    x = np.random.default_rng(5).normal(size=(3, 2))
    g = lambda k: model.params[k].data.tolist()
    h, c = [0.0, 0.0], [0.0, 0.0]
    for row in x:
        h, c = lstm_oracle(row.tolist(), h, c, g("ss/l0/fwd/Wx"), g("ss/l0/fwd/Wh"), g("ss/l0/fwd/b"))
    W, b = g("out/W"), g("out/b")
    logits = [sum(h[i] * W[i][j] for i in range(2)) + b[j] for j in range(12)]
    np.testing.assert_allclose(ss_rnn_forward(model, x), softmax(logits), atol=1e-12)


def test_ss_rnn_bidirectional_readout_uses_both_terminals():
    cfg = tiny("ss_rnn", cell="vanilla")
    model = randomize(build_model(cfg), 6)
    x = np.random.default_rng(7).normal(size=(3, 2))
    g = lambda k: model.params[k].data.tolist()
    hf = [0.0, 0.0]
    for row in x:
        hf = vanilla_oracle(row.tolist(), hf, g("ss/l0/fwd/Wx"), g("ss/l0/fwd/Wh"), g("ss/l0/fwd/b"))
    hb = [0.0, 0.0]
    for row in x[::-1]:
        hb = vanilla_oracle(row.tolist(), hb, g("ss/l0/bwd/Wx"), g("ss/l0/bwd/Wh"), g("ss/l0/bwd/b"))
    feat = hf + hb
    W, b = g("out/W"), g("out/b")
    logits = [sum(feat[i] * W[i][j] for i in range(4)) + b[j] for j in range(12)]
    np.testing.assert_allclose(ss_rnn_forward(model, x), softmax(logits), atol=1e-12)


def test_ss_rnn_wrong_shapes():
    model = build_model(tiny("ss_rnn"))
    with pytest.raises(ShapeError):
        ss_rnn_forward(model, np.zeros((3, 5)))
    with pytest.raises(ShapeError):
        ss_rnn_forward(model, np.zeros((4, 2)))


def test_ms_rnn_matches_composed_oracle():
    cfg = tiny("ms_rnn", cell="vanilla", direction="forward")
    model = randomize(build_model(cfg), 8)
    rng = np.random.default_rng(9)
    blocks = {"SSC": rng.normal(size=(3, 2)), "SI": rng.normal(size=(3, 3))}
    feat = []
    for s in ("SSC", "SI"):
        g = lambda k: model.params[f"ms/{s}/l0/fwd/{k}"].data.tolist()
        h = [0.0, 0.0]
        for row in blocks[s]:
            h = vanilla_oracle(row.tolist(), h, g("Wx"), g("Wh"), g("b"))
        feat += h
    W, b = model.params["out/W"].data, model.params["out/b"].data
    np.testing.assert_allclose(ms_rnn_forward(model, blocks), softmax(list(np.array(feat) @ W + b)), atol=1e-12)


def test_ms_rnn_identical_streams_tied_params_duplicate_halves():
    cfg = tiny("ms_rnn", streams=("SSC", "EVT"))
    model = randomize(build_model(cfg), 10)
    for k in list(model.params):
        if k.startswith("ms/EVT/"):
            model.params[k].data[...] = model.params[k.replace("ms/EVT/", "ms/SSC/")].data
    x = np.random.default_rng(11).normal(size=(1, 3, 2))
    feats = [model._rnn_features(f"ms/{s}", x, False, None).data for s in ("SSC", "EVT")]
    np.testing.assert_array_equal(feats[0], feats[1])


def test_ms_rnn_missing_stream():
    model = build_model(tiny("ms_rnn"))
    with pytest.raises(ShapeError):
        ms_rnn_forward(model, {"SSC": np.zeros((3, 2))})


def test_ms_rnn_stream_permutation_invariance():
    cfg = tiny("ms_rnn", streams=("SSC", "SI", "EVT"), fc_sizes=(5,))
    model = randomize(build_model(cfg), 12)
    perm = ("EVT", "SSC", "SI")
    other = build_model(replace(cfg, streams=perm))
    width = 2 * cfg.hidden_units
    for k, p in model.params.items():
        if k != "fc0/W":
            other.params[k].data[...] = p.data
    W = model.params["fc0/W"].data
    other.params["fc0/W"].data[...] = np.concatenate(
        [W[cfg.streams.index(s) * width:(cfg.streams.index(s) + 1) * width] for s in perm])
    blocks = sample_input(cfg, np.random.default_rng(13))
    a, b = ms_rnn_forward(model, blocks), ms_rnn_forward(other, blocks)
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert np.argmax(a) == np.argmax(b)


def test_rpnet_head_depths():
    model = randomize(build_model(tiny("rpnet_head", fc_sizes=())), 14)
    assert set(model.params) == {"out/W", "out/b"}
    x = np.array([0.3, -1.0, 2.0])
    W, b = model.params["out/W"].data, model.params["out/b"].data
    np.testing.assert_allclose(rpnet_head_forward(model, x), softmax(list(x @ W + b)), atol=1e-12)


def test_rpnet_head_two_layer_hand_computation():
    model = randomize(build_model(tiny("rpnet_head")), 15)
    x = [0.5, -0.2, 1.5]
    g = lambda k: model.params[k].data.tolist()
    W0, b0, W1, b1 = g("fc0/W"), g("fc0/b"), g("out/W"), g("out/b")
    h = [max(0.0, sum(x[i] * W0[i][j] for i in range(3)) + b0[j]) for j in range(4)]
    logits = [sum(h[i] * W1[i][j] for i in range(4)) + b1[j] for j in range(12)]
    np.testing.assert_allclose(rpnet_head_forward(model, np.array(x)), softmax(logits), atol=1e-12)
    with pytest.raises(ShapeError):
        rpnet_head_forward(model, np.zeros(4))


def test_toy_cnn2d_matches_loop_oracle_pipeline():
    cfg = tiny("toy_cnn2d", fc_sizes=())
    model = randomize(build_model(cfg), 16)
    img = np.random.default_rng(17).normal(size=(1, 4, 4))
    K, b = model.params["conv0/K"].data, model.params["conv0/b"].data
    y = conv_oracle(img, K, (1, 1), (1, 1)) + b[:, None, None]
    y = np.maximum(y, 0)
    pooled = np.array([[[y[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max() for j in range(2)] for i in range(2)]
                       for c in range(2)])
    feat = pooled.mean(axis=(1, 2))
    W, bo = model.params["out/W"].data, model.params["out/b"].data
    np.testing.assert_allclose(toy_cnn_forward(model, img), softmax(list(feat @ W + bo)), atol=1e-12)


def test_toy_cnn_shape_mismatch():
    model = build_model(tiny("toy_cnn2d"))
    with pytest.raises(ShapeError):
        toy_cnn_forward(model, np.zeros((1, 8, 8)))


# --- gradients ----------------------------------------------------------------------

def end_to_end_grad_error(cfg, seed):
    model = randomize(build_model(cfg), seed, 0.5)
    rng = np.random.default_rng(seed + 1000)
    batch = to_batch(cfg, sample_input(cfg, rng, batch=2))
    labels = rng.integers(0, 12, size=2)
    names = list(model.params)
    originals = [model.params[k] for k in names]

    def f(*ts):
        for k, t in zip(names, ts):
            model.params[k] = t
        return L.softmax_cross_entropy(model.forward(batch), labels)

    try:
        return grad_check(f, [Tensor(p.data) for p in originals])
    finally:
        for k, t in zip(names, originals):
            model.params[k] = t


@pytest.mark.parametrize("kind", KINDS)
def test_end_to_end_gradients(kind):
    variants = [{}] if kind not in ("ss_rnn", "ms_rnn") else [
        {"cell": c, "readout": r, "num_layers": n}
        for c in L.CELL_KINDS for r, n in (("terminal", 1), ("mean", 2))]
    for seed in range(20):
        extra = variants[seed % len(variants)]
        assert end_to_end_grad_error(tiny(kind, **extra), seed) < 1e-3


# --- persistence ---------------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    cfg = tiny("ms_rnn", cell="gru")
    model = randomize(build_model(cfg), 20)
    save_model(model, tmp_path / "m")
    back = load_model(tmp_path / "m")
    assert back.config == cfg
    for k in model.params:
        assert back.params[k].data.tobytes() == model.params[k].data.tobytes()


def test_load_state_dict_rejects_mismatch():
    model = build_model(tiny("rpnet_head"))
    state = model.state_dict()
    state.pop("out/b")
    with pytest.raises(ShapeError):
        model.load_state_dict(state)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(KINDS), st.integers(0, 10_000), st.floats(0.1, 100))
def test_distribution_property(kind, seed, scale):
    cfg = tiny(kind)
    model = randomize(build_model(cfg), seed % 50, 1.0)
    p = FORWARD[kind](model, sample_input(cfg, np.random.default_rng(seed), scale=scale))
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-9
