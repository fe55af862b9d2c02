"""Command-line entry point: ``surgseg {synth,train,gridsearch,segment,eval,plot}``.

Every subcommand takes ``--config FILE`` (JSON) and ``--seed``. Outputs go
under ``--out`` or, failing that, ``$SURGSEG_OUTPUT`` (default
``./surgseg_out``). Failures print one JSON object to stderr and exit 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataio import LabelSequence, NormStats, find_manifests, read_table, write_table
from .models import load_model
from .segeval import FilterConfig, metrics, median_filter, sweep_filter, write_report
from .synthgen import TASK_NAMES, GeneratorConfig, generate_dataset, make_profiles
from .training import GridSpec, TrainConfig, append_record, build_window_set, grid_search, segment, train

ENV_OUTPUT = "SURGSEG_OUTPUT"


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, code=2)


def _fail(kind: str, message: str, code: int = 1):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    sys.exit(code)


def _out_root(args) -> Path:
    return Path(args.out or os.environ.get(ENV_OUTPUT, "surgseg_out"))


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CLIError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CLIError(f"{path}: invalid JSON ({exc})")


def _split_counts(text: str) -> tuple[int, int, int]:
    parts = [int(x) for x in text.split(",")]
    if len(parts) != 3:
        raise CLIError(f"--split needs three comma-separated counts, got {text!r}")
    return tuple(parts)


def _load_splits(data_dir, counts, split_seed):
    from .pipeline import load_prepared, split_procedures
    manifests = find_manifests(data_dir)
    if not manifests:
        raise CLIError(f"no manifests found in {data_dir}")
    return split_procedures(load_prepared(manifests), counts, split_seed)


def _save_run_meta(run_dir: Path, splits, counts, split_seed, data_dir) -> None:
    meta = {
        "data": str(Path(data_dir).resolve()),
        "split": list(counts),
        "split_seed": split_seed,
        "train": [p.procedure_id for p in splits.train],
        "val": [p.procedure_id for p in splits.val],
        "test": [p.procedure_id for p in splits.test],
        "norm": {k: v.to_dict() for k, v in splits.norm.items()},
    }
    (run_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


# --- subcommands ----------------------------------------------------------------

def cmd_synth(args) -> dict:
    raw = _load_json(args.config)
    raw.pop("version", None)
    cfg = GeneratorConfig.from_dict(raw)
    if args.seed is not None:
        cfg = replace(cfg, rng_seed=args.seed)
    if args.n is not None:
        cfg = replace(cfg, n_procedures=args.n)
    out = _out_root(args) / "data"
    paths = generate_dataset(make_profiles(cfg), cfg, out, compress=args.compress)
    return {"manifests": len(paths), "directory": str(out)}


def _train_config(args) -> TrainConfig:
    raw = _load_json(args.config)
    cfg = TrainConfig.from_dict(raw) if raw else TrainConfig()
    if args.seed is not None:
        cfg = replace(cfg, rng_seed=args.seed, model=replace(cfg.model, rng_seed=args.seed))
    return cfg


def cmd_train(args) -> dict:
    cfg = _train_config(args)
    counts = _split_counts(args.split)
    splits = _load_splits(args.data, counts, args.split_seed)
    tr = build_window_set(splits.train, cfg.model)
    va = build_window_set(splits.val, cfg.model)
    root = _out_root(args)
    model, record = train(cfg, tr, va, out_dir=root / "runs", verbose=args.verbose)
    _save_run_meta(root / "runs" / record.config_hash, splits, counts, args.split_seed, args.data)
    append_record(root / "runs.jsonl", record)
    return {"run": str(root / "runs" / record.config_hash), "best_val_accuracy": record.best_val_accuracy,
            "epochs": len(record.epoch_losses)}


def cmd_gridsearch(args) -> dict:
    raw = _load_json(args.config)
    base = TrainConfig.from_dict(raw.get("base", {})) if raw.get("base") else TrainConfig()
    if args.seed is not None:
        base = replace(base, rng_seed=args.seed)
    grid = GridSpec.from_dict(raw.get("grid", {}))
    splits = _load_splits(args.data, _split_counts(args.split), args.split_seed)
    tr = build_window_set(splits.train, base.model)
    va = build_window_set(splits.val, base.model)
    root = _out_root(args)
    best, records = grid_search(grid, base, tr, va, subsample=raw.get("subsample"),
                                workers=int(raw.get("workers", 1)), log_path=root / "runs.jsonl")
    (root / "best_config.json").write_text(json.dumps(best.to_dict(), indent=2, sort_keys=True))
    return {"evaluated": len(records), "best": best.config_hash(), "best_config": str(root / "best_config.json")}


def _filter_config(args) -> FilterConfig:
    raw = _load_json(args.config)
    raw.pop("version", None)
    return FilterConfig(**raw)


def cmd_segment(args) -> dict:
    from .pipeline import load_prepared
    from .dataio import normalize_procedures
    run = Path(args.run)
    meta = json.loads((run / "run.json").read_text())
    model = load_model(run)
    data = Path(args.data or meta["data"])
    wanted = set(args.procedures.split(",")) if args.procedures else set(meta[args.subset])
    manifests = [m for m in find_manifests(data) if m.stem.split(".")[0] in wanted]
    procs = [p for p in load_prepared(manifests) if p.procedure_id in wanted]
    missing = wanted - {p.procedure_id for p in procs}
    if missing:
        raise CLIError(f"procedures not found in {data}: {sorted(missing)}")
    normalize_procedures(procs, {k: NormStats.from_dict(v) for k, v in meta["norm"].items()})
    fcfg = _filter_config(args)
    out = _out_root(args) / "segments"
    for p in procs:
        raw, filt = segment(model, p, fcfg)
        rows = np.column_stack([np.arange(len(raw)), p.labels.labels, raw.labels, filt.labels])
        write_table(out / f"{p.procedure_id}.csv", ["sample", "truth", "raw", "filtered"], rows, fmt="%d")
    (out / "segments.json").write_text(json.dumps({"rate": procs[0].rate if procs else 5.0,
                                                   "filter": {"F": fcfg.F, "mode": fcfg.mode}}))
    return {"procedures": len(procs), "directory": str(out)}


def _read_segments(seg_dir: Path):
    files = sorted(seg_dir.glob("*.csv"))
    if not files:
        raise CLIError(f"no segment tables in {seg_dir}")
    info = json.loads((seg_dir / "segments.json").read_text()) if (seg_dir / "segments.json").exists() else {}
    rate = info.get("rate", 5.0)
    out = []
    for f in files:
        t = read_table(f, ["sample", "truth", "raw", "filtered"]).astype(np.int64)
        out.append((f.stem, *(LabelSequence(t[:, i], rate) for i in (1, 2, 3))))
    return out


def cmd_eval(args) -> dict:
    seg_dir = Path(args.segments) if args.segments else _out_root(args) / "segments"
    segs = _read_segments(seg_dir)
    ids = [s[0] for s in segs]
    G = [s[1] for s in segs]
    raw = metrics(G, [s[2] for s in segs], ids)
    filt = metrics(G, [s[3] for s in segs], ids)
    path = write_report(_out_root(args) / "metrics.tsv", raw, filt, TASK_NAMES)
    result = {"report": str(path), "jaccard_raw": raw.mean["jaccard"], "jaccard_filtered": filt.mean["jaccard"]}
    if args.sweep:
        lengths = [int(x) for x in args.sweep.split(",")]
        sweep = sweep_filter(G, [s[2] for s in segs], lengths)
        write_table(_out_root(args) / "filter_sweep.csv", ["F", "jaccard"], np.array(sweep), fmt="%.6g")
        result["sweep"] = sweep
    return result


def cmd_plot(args) -> dict:
    from .plots import plot_confusion, plot_filter_sweep, plot_segmentation
    seg_dir = Path(args.segments) if args.segments else _out_root(args) / "segments"
    segs = _read_segments(seg_dir)
    out = _out_root(args) / "figures"
    written = []
    for pid, g, raw, filt in segs:
        written.append(plot_segmentation(g, raw, filt, out / f"segmentation_{pid}.svg", TASK_NAMES, title=pid))
    G = [s[1] for s in segs]
    rep = metrics(G, [s[3] for s in segs])
    written.append(plot_confusion(rep.confusion, out / "confusion_filtered.svg", "filtered predictions"))
    written.append(plot_confusion(metrics(G, [s[2] for s in segs]).confusion, out / "confusion_raw.svg",
                                  "raw predictions"))
    if args.sweep:
        lengths = [int(x) for x in args.sweep.split(",")]
        raw_j = metrics(G, [s[2] for s in segs]).mean["jaccard"]
        written.append(plot_filter_sweep(sweep_filter(G, [s[2] for s in segs], lengths),
                                         out / "filter_sweep.svg", raw_j))
    return {"figures": [str(p) for p in written]}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="surgseg", description="Windowed surgical-task segmentation toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="override the config's random seed")
        sp.add_argument("--out", help=f"output root (default ${ENV_OUTPUT} or ./surgseg_out)")

    sp = sub.add_parser("synth", help="generate synthetic procedures")
    common(sp)
    sp.add_argument("--n", type=int, help="number of procedures")
    sp.add_argument("--compress", action="store_true", help="gzip the stream tables")
    sp.set_defaults(func=cmd_synth)

    for name, func, helptext in (("train", cmd_train, "train one configuration"),
                                 ("gridsearch", cmd_gridsearch, "train every grid point")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--data", required=True, help="directory of manifests")
        sp.add_argument("--split", default="70,10,20", help="train,val,test procedure counts")
        sp.add_argument("--split-seed", type=int, default=0)
        sp.add_argument("--verbose", action="store_true")
        sp.set_defaults(func=func)

    sp = sub.add_parser("segment", help="segment procedures with a trained run")
    common(sp)
    sp.add_argument("--run", required=True, help="run directory written by train")
    sp.add_argument("--data", help="manifest directory (default: the run's training data)")
    sp.add_argument("--subset", choices=("train", "val", "test"), default="test")
    sp.add_argument("--procedures", help="comma-separated procedure ids (overrides --subset)")
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("eval", help="score segment tables")
    common(sp)
    sp.add_argument("--segments", help="directory of segment tables")
    sp.add_argument("--sweep", help="comma-separated filter lengths to sweep")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("plot", help="render SVG figures from segment tables")
    common(sp)
    sp.add_argument("--segments", help="directory of segment tables")
    sp.add_argument("--sweep", help="comma-separated filter lengths to sweep")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except (CLIError, ValueError, OSError, RuntimeError, KeyError) as exc:
        _fail(type(exc).__name__, str(exc))
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
