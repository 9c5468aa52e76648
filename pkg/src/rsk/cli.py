"""Command line: rsk {train,eval,gradcheck,ablate,gen-data}."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import gradcheck
from .config import ConfigError, RunConfig, load_config, parse_assignment
from .data import DataFormatError, generate_clusters, load_features, save_features, split_per_class
from .evaluation import evaluate_split
from .model import CheckpointError, load_checkpoint
from .runs import ablation_text, parse_sweep, prepare_data, run_ablation, run_training, write_report
from .sampler import SamplerError
from .train import NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_GRADCHECK = 5


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--simix", choices=["on", "off"])
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--out", help="output directory (or file for gen-data)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsk", description="Recall@k surrogate metric learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an embedder and write a checkpoint")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="feature file; default is the checkpoint's held-out split")
    p.add_argument("--k", default="1,2,4,8", help="comma-separated cutoffs")

    p = sub.add_parser("gradcheck", help="finite-difference checks of all analytic gradients")
    _add_common(p)
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--max-batch", type=int, default=16)
    p.add_argument("--inject-sign-flip", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("ablate", help="sweep tau1, batch size or SiMix")
    _add_common(p)
    p.add_argument("--sweep", required=True, help="tau1 | batch_size | simix, optionally =v1,v2,...")
    p.add_argument("--seeds", default="0,1,2")

    p = sub.add_parser("gen-data", help="write a synthetic clustered dataset")
    _add_common(p)
    p.add_argument("--heldout", help="also write the held-out split here")
    return parser


def _config(args) -> RunConfig:
    overrides = dict(parse_assignment(a) for a in args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.simix is not None:
        overrides["simix"] = args.simix
    if args.chunk_size is not None:
        overrides["chunk_size"] = str(args.chunk_size)
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out or "run")
    result = run_training(cfg, out)
    print(f"batch size {cfg.batch_size}, expanded batch size {result.expanded_size}")
    print(f"final loss {result.losses[-1]:.6f}  config_hash {result.config_hash}")
    print(result.metrics.to_text(), end="")
    print(f"checkpoint written to {out / 'checkpoint.npz'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, header = load_checkpoint(args.checkpoint)
    ks = [int(k) for k in args.k.split(",")]
    if args.dataset:
        x, y = load_features(args.dataset)
        seed = header.get("config", {}).get("seed", 0)
    else:
        stored = header.get("config") or {}
        cfg = RunConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in stored.items()})
        _, _, x, y = prepare_data(cfg)
        seed = cfg.seed
    if x.shape[1] != model.input_dim:
        raise DataFormatError("dim-mismatch", f"dataset has dim {x.shape[1]}, checkpoint expects {model.input_dim}")
    table = evaluate_split(model, x, y, ks)
    print(table.to_text(), end="")
    if args.out:
        write_report(args.out, table, seed, header.get("config_hash", ""))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if not 4 <= args.max_batch <= 32:
        raise ConfigError("--max-batch", "gradient checks run on batches of at most 32")
    seed = args.seed if args.seed is not None else 0
    results = gradcheck.run_all(cases=args.cases, seed=seed, sign_flip=args.inject_sign_flip, max_batch=args.max_batch)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_GRADCHECK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    try:
        key, values = parse_sweep(args.sweep)
    except ValueError as exc:
        raise ConfigError("--sweep", str(exc)) from None
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = run_ablation(cfg, key, values, seeds)
    text = ablation_text(rows)
    print(text, end="")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "ablation.tsv").write_text(text)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if not args.out:
        raise ConfigError("--out", "gen-data needs an output path")
    x, y = generate_clusters(cfg.num_classes, cfg.samples_per_class, cfg.input_dim, cfg.noise, cfg.data_seed)
    if args.heldout:
        tr, te = split_per_class(y, cfg.holdout_per_class, cfg.data_seed)
        save_features(args.heldout, x[te], y[te])
        x, y = x[tr], y[tr]
    save_features(args.out, x, y)
    print(f"wrote {len(y)} examples of dim {x.shape[1]} to {args.out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "gen-data": cmd_gen_data,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError, SamplerError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
