"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .checkpoint import CheckpointError, CheckpointMismatchError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_datasets
from .data import DataError, SyntheticContextSpec, channel_stats, generate_synthetic, load_synthetic, save_synthetic
from .models import build_basecnn_x, build_from_spec, count_parameters
from .tensor import NonFiniteError
from .training import TrainingDiverged, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("crosspath")


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise ConfigError(f"--set expects section.key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_config(args) -> ExperimentConfig:
    ov = _overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        ov["experiment.seed"] = str(args.seed)
    if getattr(args, "out", None):
        ov["experiment.out_dir"] = args.out
    if args.config is None:
        return ExperimentConfig.from_ini("", ov)
    return ExperimentConfig.load(args.config, ov)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    train_ds, val_ds = load_datasets(cfg)
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.ini")
    if cfg.data.source == "synthetic":
        full = generate_synthetic(cfg.data.synthetic_spec())
        save_synthetic(full, run_dir / "dataset.bin")
    spec = cfg.model_spec(train_ds.classes, train_ds.image_shape)
    model = build_from_spec(spec)
    report = train(model, train_ds, val_ds, cfg.train_config(), out_dir=run_dir)
    print(f"final val error {100 * (1 - report.final.val_acc):.2f}%  "
          f"best val error {100 * report.best_val_error:.2f}% (epoch {report.best_epoch})")
    return EXIT_OK


def _analysis_dataset(args, model):
    """Validation split of --config, or a whole synthetic --data file."""
    if getattr(args, "data", None):
        ds = load_synthetic(args.data)
        if model.input_mean is not None:
            return ds.with_stats(model.input_mean, model.input_std)
        return ds.with_stats(*channel_stats(ds.images))
    if args.config:
        _, val = load_datasets(ExperimentConfig.load(args.config, _overrides(getattr(args, "set", None))))
        return val
    raise ConfigError("pass --config (uses its validation split) or --data FILE")


def _load_model(args):
    path = Path(args.checkpoint)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_eval(args) -> int:
    model = _load_model(args)
    ds = _analysis_dataset(args, model)
    if ds.image_shape != tuple(model.spec.input_shape):
        raise CheckpointMismatchError(f"dataset images {ds.image_shape} do not fit model input {model.spec.input_shape}")
    res = evaluate(model, ds)
    print(f"loss {res.loss:.6f}  accuracy {res.accuracy:.4f}  n {res.n}")
    for c, a in enumerate(res.per_class_accuracy):
        print(f"  class {c}: {'n/a' if np.isnan(a) else f'{a:.4f}'}")
    return EXIT_OK


def cmd_params(args) -> int:
    shape = tuple(int(v) for v in args.input.split(","))
    paths = [args.paths] if args.paths else [1, 2, 3, 4]
    for p in paths:
        model = build_basecnn_x(paths=p, classes=args.classes, input_shape=shape, mode=args.mode)
        total, rows = count_parameters(model)
        print(f"BaseCNN-{p} ({args.mode}): {total:,} parameters ({total / 1e6:.2f}M)")
        if not args.quiet:
            for name, count in rows:
                print(f"  {name:28s} {count:>10,}")
    return EXIT_OK


def cmd_trace(args) -> int:
    model = _load_model(args)
    ds = _analysis_dataset(args, model)
    out = _out_dir(args)
    trace = analysis.trace_routes(model, ds)
    analysis.export_trace_csv(trace, out / "trace.csv")
    analysis.export_trace_json(trace, out / "trace.json")
    if trace.layers:
        (out / "route_sample0.svg").write_text(analysis.route_svg(trace, 0))
    if trace.contexts is not None and trace.layers:
        divs = analysis.context_gate_divergence(trace)
        with open(out / "context_divergence.csv", "w") as fh:
            fh.write("layer,input,l1\n")
            for d in divs:
                fh.write(f"{d.layer},{d.input_index},{d.l1!r}\n")
        print(f"largest context gate divergence: layer {divs[0].layer} input {divs[0].input_index} L1 {divs[0].l1:.3f}")
    print(f"traced {trace.n_samples} samples x {len(trace.layers)} cross layers -> {out}")
    return EXIT_OK


def cmd_rank(args) -> int:
    model = _load_model(args)
    ds = _analysis_dataset(args, model)
    out = _out_dir(args)
    r = analysis.rank_by_gate(model, ds, args.layer, args.input, args.gate, args.k)
    analysis.export_ranking_csv(r, out / "ranking.csv")
    print("top:   ", " ".join(map(str, r.top_ids)))
    print("bottom:", " ".join(map(str, r.bottom_ids)))
    return EXIT_OK


def cmd_synth(args) -> int:
    model = _load_model(args)
    out = _out_dir(args)
    cfg = analysis.SynthesisConfig(args.layer, args.input, args.gate, args.steps, args.step_size, args.l2,
                                   args.init, args.seed if args.seed is not None else 0)
    res = analysis.synthesize_gate_input(model, cfg)
    analysis.write_ppm(out / "synth.ppm", res.raw_image, scale=args.scale)
    analysis.export_objective_csv(res, out / "objective.csv")
    print(f"objective {res.objective[0]:.4f} -> {res.objective[-1]:.4f}")
    return EXIT_OK


def cmd_hist(args) -> int:
    model = _load_model(args)
    out = _out_dir(args)
    hists = analysis.weight_histograms(model, args.layers.split(","), args.bins)
    analysis.export_histograms_csv(hists, out / "histograms.csv")
    for h in hists:
        (out / f"hist_{h.layer}.svg").write_text(analysis.histogram_svg(h))
        print(f"{h.layer}: max pairwise L1 {h.max_distance:.4f}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    if args.config:
        spec = ExperimentConfig.load(args.config, _overrides(args.set)).data.synthetic_spec()
    else:
        spec = SyntheticContextSpec(args.contexts, args.classes, args.per_cell, args.size, args.noise,
                                    seed=args.seed if args.seed is not None else 0)
    ds = generate_synthetic(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_synthetic(ds, out)
    print(f"wrote {len(ds)} images to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crosspath", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False, data=False, out_default=None):
        sp.add_argument("--config", help="experiment config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default=out_default)
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        if data:
            sp.add_argument("--data", help="synthetic dataset file (instead of --config)")

    sp = sub.add_parser("train", help="train a model from a config")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp, checkpoint=True, data=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("params", help="parameter-count table")
    sp.add_argument("--paths", type=int)
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--input", default="3,32,32", help="C,H,W")
    sp.add_argument("--mode", default="adaptive", choices=["adaptive", "fixed-stitch", "no-cross"])
    sp.add_argument("--quiet", action="store_true", help="totals only")
    sp.set_defaults(func=cmd_params)

    sp = sub.add_parser("trace", help="export route traces")
    common(sp, checkpoint=True, data=True, out_default="analysis")
    sp.set_defaults(func=cmd_trace)

    for name, func, helptext in (("rank", cmd_rank, "top/bottom samples for one gate"),
                                 ("synth", cmd_synth, "synthesize an input maximizing a gate neuron")):
        sp = sub.add_parser(name, help=helptext)
        common(sp, checkpoint=True, data=(name == "rank"), out_default="analysis")
        sp.add_argument("--layer", type=int, default=1)
        sp.add_argument("--input", type=int, default=0)
        sp.add_argument("--gate", type=int, default=0)
        if name == "rank":
            sp.add_argument("--k", type=int, default=10)
        else:
            sp.add_argument("--steps", type=int, default=256)
            sp.add_argument("--step-size", type=float, default=0.1)
            sp.add_argument("--l2", type=float, default=0.01)
            sp.add_argument("--init", default="zeros", choices=["zeros", "noise"])
            sp.add_argument("--scale", type=int, default=8, help="PPM upscaling factor")
        sp.set_defaults(func=func)

    sp = sub.add_parser("hist", help="per-path weight histograms")
    common(sp, checkpoint=True, out_default="analysis")
    sp.add_argument("--layers", default="conv2,conv4,conv6,fc1")
    sp.add_argument("--bins", type=int, default=40)
    sp.set_defaults(func=cmd_hist)

    sp = sub.add_parser("gen-data", help="write a synthetic multi-context dataset file")
    common(sp, out_default="synthetic.bin")
    sp.add_argument("--contexts", type=int, default=2)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--per-cell", type=int, default=125)
    sp.add_argument("--size", type=int, default=12)
    sp.add_argument("--noise", type=float, default=0.35)
    sp.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteError, analysis.SynthesisDiverged) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, IndexError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
