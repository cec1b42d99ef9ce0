"""Command-line entry point.

Exit codes: 0 success, 1 run or check failure, 2 usage error. Progress goes to
stderr; results go to stdout and to files under ``--out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .data import DatasetManifest, SyntheticParams, generate_synthetic, make_folds
from .deform import offset_channels
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint, stage_shapes
from .training import (RATES, ConfusionMatrix, TrainConfig, write_history, compare_mixers,
                       compute_metrics, cross_validate, evaluate, train_fold)
from .verify import DEFAULT_TOLERANCE, gradcheck_suite

log = logging.getLogger("deformableformer")


def _model_args(p, default_config=None):
    p.add_argument("--config", help="model config JSON (default: the full four-stage model)",
                   default=default_config)
    p.add_argument("--mixer", choices=("deformable", "pooling", "identity"),
                   help="override mixer_kind")


def _train_args(p):
    p.add_argument("--train-config", help="train config JSON")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--optimizer", choices=("adamw", "sgd-momentum"))
    p.add_argument("--weight-decay", type=float)


def build_parser():
    parser = argparse.ArgumentParser(prog="deformableformer", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", help="output directory (default runs/<subcommand>)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = add("synth", "generate the synthetic small-object dataset")
    p.add_argument("--image-size", type=int, nargs=2, default=[64, 64], metavar=("H", "W"))
    p.add_argument("--object-radius-range", type=float, nargs=2, default=[5.0, 11.0])
    p.add_argument("--object-count-positive", type=int, nargs=2, default=[1, 3])
    p.add_argument("--background-noise-std", type=float, default=0.05)
    p.add_argument("--negative-occupancy-max", type=float, default=0.01)
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--k-folds", type=int, default=1, help="assign stratified folds")

    p = add("train", "train one model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--test-fold", type=int, help="hold this fold out of training")
    _model_args(p)
    _train_args(p)

    p = add("eval", "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", type=int, help="evaluate only this fold")

    p = add("crossval", "k-fold cross-validation with per-fold checkpoints")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, help="reassign stratified folds with this k")
    p.add_argument("--mixers", nargs="+", choices=("deformable", "pooling", "identity"),
                   help="run each mixer and write one report row per mixer")
    p.add_argument("--jobs", type=int, default=1)
    _model_args(p)
    _train_args(p)

    p = add("gradcheck", "finite-difference check of every layer type")
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--config", help="model config whose first stage sets kernel sizes")

    p = add("metrics", "rates from confusion counts")
    for name in ("tp", "fp", "fn", "tn"):
        p.add_argument(f"--{name}", type=int, required=True)

    p = add("shapes", "stage-by-stage shapes for a config")
    _model_args(p)
    p.add_argument("--input", type=int, required=True, help="square input side")
    p.add_argument("--batch", type=int, default=1)
    return parser


def resolve_model_config(args) -> ModelConfig:
    d = ModelConfig().to_dict()
    if getattr(args, "config", None):
        d.update(json.loads(Path(args.config).read_text()))
    if getattr(args, "mixer", None):
        d["mixer_kind"] = args.mixer
    return ModelConfig.from_dict(d)


def resolve_train_config(args) -> TrainConfig:
    d = TrainConfig().to_dict()
    if args.train_config:
        d.update(json.loads(Path(args.train_config).read_text()))
    for key in ("epochs", "batch_size", "learning_rate", "optimizer", "weight_decay", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    return TrainConfig.from_dict(d)


def write_meta(out: Path, args, resolved: dict):
    out.mkdir(parents=True, exist_ok=True)
    argv = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    meta = {"subcommand": args.command, "arguments": argv, "resolved": resolved,
            "seed": resolved.get("seed", args.seed), "code_version": __version__}
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")


def emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


def cmd_synth(args, out):
    params = SyntheticParams(tuple(args.image_size), tuple(args.object_radius_range),
                             tuple(args.object_count_positive), args.background_noise_std,
                             args.negative_occupancy_max, 7 if args.seed is None else args.seed,
                             args.n_per_class)
    manifest = generate_synthetic(params, out)
    if args.k_folds > 1:
        manifest = make_folds(manifest, args.k_folds, params.seed)
        manifest.save(out / "manifest.json")
    write_meta(out, args, {"seed": params.seed, "synthetic": asdict(params)})
    emit({"manifest": str(out / "manifest.json"), "records": len(manifest.records),
          "k_folds": manifest.k_folds})
    return 0


def cmd_train(args, out):
    mcfg, tcfg = resolve_model_config(args), resolve_train_config(args)
    manifest = DatasetManifest.load(args.manifest)
    records = manifest.records if args.test_fold is None else manifest.excluding(args.test_fold)
    model = build_model(mcfg, tcfg.seed)
    history, norm = train_fold(model, manifest, records, tcfg)
    save_checkpoint(model, out / "checkpoint", extra={"normalization": norm})
    write_history(out / "history.csv", history)
    write_meta(out, args, {"model_config": mcfg.to_dict(), "train_config": tcfg.to_dict(),
                           "seed": tcfg.seed})
    emit({"checkpoint": str(out / "checkpoint"), "epoch_loss": history.epoch_loss})
    return 0


def cmd_eval(args, out):
    model, extra = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.load(args.manifest)
    records = manifest.records if args.fold is None else manifest.fold(args.fold)
    cm = evaluate(model, manifest, records, extra.get("normalization"))
    doc = {"confusion": cm.to_dict(), "rates": compute_metrics(cm).display()}
    out.mkdir(parents=True, exist_ok=True)
    (out / "confusion_matrix.json").write_text(json.dumps(doc, indent=2) + "\n")
    write_meta(out, args, {"checkpoint": args.checkpoint, "fold": args.fold})
    emit(doc)
    return 0


def cmd_crossval(args, out):
    mcfg, tcfg = resolve_model_config(args), resolve_train_config(args)
    manifest = DatasetManifest.load(args.manifest)
    if args.k:
        manifest = make_folds(manifest, args.k, tcfg.seed)
    if args.mixers:
        reports = compare_mixers(manifest, mcfg, tcfg, out, args.mixers, args.jobs)
    else:
        reports = [cross_validate(manifest, mcfg, tcfg, out, args.jobs)]
    write_meta(out, args, {"model_config": mcfg.to_dict(), "train_config": tcfg.to_dict(),
                           "seed": tcfg.seed, "k_folds": manifest.k_folds})
    sys.stdout.write((out / "report.csv").read_text())
    return 0 if all(r.status == "ok" for r in reports) else 1


def cmd_gradcheck(args, out):
    seed = 0 if args.seed is None else args.seed
    kernel = 3
    if args.config:
        kernel = ModelConfig.from_json(args.config).stages[0].mixer_kernel
    errors = gradcheck_suite(seed, args.epsilon, kernel=kernel)
    failed = sorted(k for k, v in errors.items() if not v < args.tol)
    doc = {"tolerance": args.tol, "max_relative_error": errors, "failed": failed}
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.json").write_text(json.dumps(doc, indent=2) + "\n")
    write_meta(out, args, {"seed": seed, "epsilon": args.epsilon, "kernel": kernel})
    for name, err in errors.items():
        sys.stdout.write(f"{name:18s} {err:.3e} {'ok' if err < args.tol else 'FAIL'}\n")
    return 1 if failed else 0


def cmd_metrics(args, out):
    cm = ConfusionMatrix(args.tp, args.fp, args.fn, args.tn)
    shown = compute_metrics(cm).display()
    for k in RATES:
        sys.stdout.write(f"{k} {shown[k]}\n")
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps({"confusion": cm.to_dict(), "rates": shown},
                                                 indent=2) + "\n")
    write_meta(out, args, {"confusion": cm.to_dict()})
    return 0


def cmd_shapes(args, out):
    mcfg = resolve_model_config(args)
    shape = (args.batch, mcfg.input_channels, args.input, args.input)
    if args.input % mcfg.reduction:
        raise ValueError(f"input {args.input} not divisible by {mcfg.reduction}")
    rows = []
    sys.stdout.write(f"input  {shape}\n")
    for i, (s, shp) in enumerate(zip(mcfg.stages, stage_shapes(mcfg, shape)), 1):
        k = s.mixer_kernel
        offsets = (shp[0], offset_channels(k, k), shp[2], shp[3])
        rows.append({"stage": i, "output": list(shp), "offset_field": list(offsets)})
        sys.stdout.write(f"stage{i} {shp}  H/{args.input // shp[2]}  offsets {offsets}\n")
    sys.stdout.write(f"logits ({args.batch}, {mcfg.num_classes})\n")
    out.mkdir(parents=True, exist_ok=True)
    (out / "shapes.json").write_text(json.dumps(rows, indent=2) + "\n")
    write_meta(out, args, {"model_config": mcfg.to_dict(), "input": list(shape)})
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "crossval": cmd_crossval,
            "gradcheck": cmd_gradcheck, "metrics": cmd_metrics, "shapes": cmd_shapes}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out or f"runs/{args.command}")
    try:
        return COMMANDS[args.command](args, out)
    except (ValueError, OSError, RuntimeError) as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
