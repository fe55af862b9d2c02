"""Named desk-scale benchmark setups used by the acceptance suite.

Each preset bundles the generator, model, training and filter settings so a
run can be repeated from its name and seed alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .dataio import prepare_recording
from .models import ModelConfig
from .segeval import FilterConfig, assemble_sequence, median_filter, metrics
from .synthgen import GeneratorConfig, PrototypeClassifier, generate_procedure, make_profiles
from .training import TrainConfig


@dataclass
class Benchmark:
    generator: GeneratorConfig
    counts: tuple[int, int, int]
    filter: FilterConfig
    train: dict[str, TrainConfig] = field(default_factory=dict)
    split_seed: int = 0


def end_to_end(seed: int = 0) -> Benchmark:
    """40 procedures, 28/4/8 split, bidirectional single-stream LSTM (H=64, W=200)."""
    gen = GeneratorConfig(n_procedures=40, rng_seed=seed, duration_scale=0.5, streams=("SSC", "SI", "EVT"))
    model = ModelConfig(kind="ss_rnn", cell="lstm", hidden_units=64, direction="bidirectional", dropout=0.2,
                        window_length=200, readout="mean", rng_seed=seed + 1)
    tc = TrainConfig(model=model, optimizer="adam", learning_rate=3e-3, epochs=8, rng_seed=seed + 1)
    return Benchmark(gen, (28, 4, 8), FilterConfig(301), {"ss_lstm": tc}, split_seed=seed)


def architectures(seed: int = 0) -> Benchmark:
    """Standard benchmark with confusable pairs: frame head, multi-stream LSTM and the weakest RNN."""
    gen = GeneratorConfig(n_procedures=20, rng_seed=seed, duration_scale=0.1, backbone_dim=256, frame_noise=2.0)
    common = dict(optimizer="adam", learning_rate=3e-3, epochs=10, early_stop_patience=3, rng_seed=seed)
    models = {
        "rpnet_head": ModelConfig(kind="rpnet_head", backbone_dim=256, dropout=0.2, rng_seed=seed),
        "ms_rnn": ModelConfig(kind="ms_rnn", cell="lstm", hidden_units=32, direction="bidirectional",
                              dropout=0.2, window_length=50, readout="mean", rng_seed=seed),
        "ss_vanilla_8": ModelConfig(kind="ss_rnn", cell="vanilla", hidden_units=8, direction="forward",
                                    dropout=0.0, window_length=50, readout="mean", rng_seed=seed),
    }
    # F scaled with the durations: 301 samples at full length is about 31 at one tenth
    return Benchmark(gen, (14, 2, 4), FilterConfig(31),
                     {k: TrainConfig(model=m, **common) for k, m in models.items()}, split_seed=seed)


def noisy_frames(seed: int = 0, frame_noise: float = 2.75, n_procedures: int = 30) -> Benchmark:
    """Frame-only procedures classified by nearest prototype, one prediction per frame."""
    gen = GeneratorConfig(n_procedures=n_procedures, rng_seed=seed, streams=("FRAME",), backbone_dim=64,
                          frame_noise=frame_noise)
    return Benchmark(gen, (0, 0, n_procedures), FilterConfig(301))


def prototype_segmentation(bench: Benchmark):
    """Raw and filtered metrics of nearest-prototype frame predictions over every procedure."""
    profiles = make_profiles(bench.generator)
    clf = PrototypeClassifier.from_profiles(profiles, "FRAME")
    truth, raw, filtered = [], [], []
    for i in range(bench.generator.n_procedures):
        p = prepare_recording(generate_procedure(profiles, bench.generator, i))
        pred = clf.predict({"FRAME": p.frames})
        W = int(round(p.rate / p.frame_rate))
        seq = assemble_sequence([(W * k, int(lab)) for k, lab in enumerate(pred)], W, p.n_samples, p.rate)
        truth.append(p.labels)
        raw.append(seq)
        filtered.append(median_filter(seq, bench.filter))
    return metrics(truth, raw), metrics(truth, filtered)
