"""Command line entry point: ``isaclab gen-data | train | eval | verify``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from ..isacnn import TrainConfig, TrainingDiverged, train
from ..isacnn.checkpoint import load_checkpoint, save_checkpoint
from ..scene import ConfigError, generate_dataset, read_dataset, write_dataset
from . import config as cfgmod
from . import experiments, verify

log = logging.getLogger("isaclab")

EXIT_OK, EXIT_FAIL, EXIT_DIVERGED = 0, 1, 2


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isaclab", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a binary scene dataset")
    g.add_argument("--config", help="system config file (key = value)")
    g.add_argument("--samples", type=int, default=10000)
    g.add_argument("--seed", type=int)
    g.add_argument("--alpha", type=float)
    g.add_argument("--split", type=float, default=0.2, help="validation fraction")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a network on a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--config", help="training config file (key = value)")
    t.add_argument("--arch", choices=experiments.LEARNED, default="isacnn")
    t.add_argument("--alpha", type=float, help="defaults to the dataset's alpha")
    t.add_argument("--seed", type=int, help="initialisation and shuffling seed")
    t.add_argument("--epochs", type=int, help="stop after this many new epochs")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="per-epoch CSV (default: <out>.log.csv)")

    e = sub.add_parser("eval", help="run an evaluation sweep and write a results CSV")
    e.add_argument("--config", help="experiment file: experiment keys plus system keys")
    e.add_argument("--sweep", choices=experiments.SWEEPS)
    e.add_argument("--values", type=_floats, help="comma-separated sweep values")
    e.add_argument("--scheme", type=_names, help="comma-separated schemes")
    e.add_argument("--samples", type=int, help="evaluation scenes per sweep value")
    e.add_argument("--seed", type=int, help="evaluation seed")
    e.add_argument("--alpha", type=float)
    e.add_argument("--checkpoint", help="path template with {value} and {scheme}")
    e.add_argument("--train-config", help="training config for networks trained on the fly")
    e.add_argument("--save-dir", help="keep networks trained on the fly here")
    e.add_argument("--timing", action="store_true", help="measure per-prediction runtime")
    e.add_argument("--out", required=True)

    v = sub.add_parser("verify", help="run numerical property checks")
    v.add_argument("--scope", choices=(*verify.SCOPES, "all"), default="all")
    v.add_argument("--seed", type=int, default=0)
    return p


def cmd_gen_data(args) -> int:
    cfg = cfgmod.load_system(args.config, args.seed)
    if args.alpha is not None:
        cfg = cfg.replace(alpha=args.alpha)
    data = generate_dataset(cfg, args.samples, split=args.split)
    write_dataset(data, args.out)
    log.info("wrote %d scenes (feature length %d) to %s", args.samples, cfg.feature_len, args.out)
    return EXIT_OK


def load_train_config(path, seed=None) -> TrainConfig:
    tc = cfgmod.load(TrainConfig, path)
    if seed is not None:
        tc = dataclasses.replace(tc, seed=seed)
    return tc


def cmd_train(args) -> int:
    data = read_dataset(args.dataset)
    run = None
    if args.resume:
        _, run = load_checkpoint(args.resume)
        if run is None:
            raise ConfigError(f"{args.resume} holds no training state")
        tc = run.config
    else:
        tc = load_train_config(args.config, args.seed)
    alpha = args.alpha if args.alpha is not None else data.config.alpha
    log_path = args.log or f"{args.out}.log.csv"
    try:
        net, run = train(data, tc, arch=args.arch, alpha=alpha, run=run,
                         max_new_epochs=args.epochs)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(args.out, net, run)
    Path(log_path).write_text(experiments.train_log_csv(run))
    print(f"epochs={run.epoch} best_epoch={run.best_epoch} best_val_loss={run.best_val!r} "
          f"stopped={run.stopped}")
    return EXIT_OK


def cmd_eval(args) -> int:
    spec = (experiments.load_experiment(args.config, args.seed) if args.config
            else experiments.ExperimentSpec())
    changes = {}
    if args.sweep:
        changes["sweep"] = args.sweep
    if args.values:
        changes["values"] = args.values
    if args.scheme:
        changes["schemes"] = args.scheme
    if args.samples:
        changes["eval_samples"] = args.samples
    changes["seed"] = cfgmod.resolve_seed(args.seed, spec.seed)
    if args.alpha is not None:
        changes["base"] = spec.base.replace(alpha=args.alpha)
    spec = dataclasses.replace(spec, **changes)
    tc = load_train_config(args.train_config)
    rows, samples = experiments.run_experiment(
        spec, tc, checkpoints=args.checkpoint, timing=args.timing,
        save_dir=args.save_dir, progress=log.info)
    Path(args.out).write_text(experiments.results_csv(rows))
    Path(f"{args.out}.samples.csv").write_text(experiments.samples_csv(samples))
    for r in rows:
        print(f"{r.scheme} {r.sweep}={r.value:g} wsnr={r.wsnr:.6f} "
              f"sense={r.sense_rate:.6f} comm={r.comm_rate:.6f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = verify.run(args.scope, args.seed)
    for c in checks:
        print(c.line())
    return EXIT_OK if all(c.passed for c in checks) else EXIT_FAIL


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
