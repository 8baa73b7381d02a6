"""Command-line entry point: ``tdrl {train,eval,ablate,gradcheck,export,gen-data}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import ablate as ablate_mod
from .config import ConfigError, config_hash, gen_spec, load_config, network_config
from .experiment import load_data, run
from .gradcheck import run_checks, standard_checks
from .serialize import FormatError
from .synthdata import generate_clip, save_clips
from .train import CheckpointMismatch, NumericalFailure, evaluate, load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4

log = logging.getLogger("tdrl")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def _config(args) -> dict:
    return load_config(args.config, args.set or [])


def cmd_train(args) -> int:
    cfg = _config(args)
    out = args.out or cfg["run"]["out_dir"]
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))
    record, _ = run(cfg, out_dir=out, on_epoch=lambda m: _emit(asdict(m)))
    _emit({"config_hash": record.config_hash, "best_val_acc": record.best_val_acc, "best_epoch": record.best_epoch})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    net = network_config(cfg)
    params = load_checkpoint(args.checkpoint, net)
    _, val = load_data(cfg)
    _emit({"config_hash": config_hash(cfg), **evaluate(net, params, val)})
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    rows = ablate_mod.ablate(args.grid, cfg, seeds=args.seeds, workers=args.workers)
    for r in rows:
        _emit({"label": r.label, "config_hashes": r.config_hashes, "seeds": r.seeds, "medians": r.medians})
    print(ablate_mod.format_table(rows), file=sys.stderr)
    if args.out:
        ablate_mod.write_results(args.out, rows)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    failed = 0
    for r in run_checks(standard_checks(args.seed)):
        _emit({"op": r.name, "max_rel_error": r.error, "tol": r.tol, "passed": r.passed})
        failed += not r.passed
    return EXIT_GRADCHECK if failed else EXIT_OK


def cmd_export(args) -> int:
    from .export import export_diversity, export_enhancements

    cfg = _config(args)
    net = network_config(cfg)
    params = load_checkpoint(args.checkpoint, net)
    clip = generate_clip(args.clip_seed, args.clip_class, gen_spec(cfg))
    written = []
    if args.what in ("enhancement", "both"):
        written += export_enhancements(net, params, clip, args.out)
    if args.what in ("diversity", "both"):
        written += export_diversity(net, params, clip, args.out)
    for p in written:
        _emit({"wrote": str(p)})
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    cfg["data"]["cache_dir"] = None
    tr, va = load_data(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, batch in (("train", tr), ("val", va)):
        save_clips(out / f"{name}.clips", batch)
        _emit({"wrote": str(out / f"{name}.clips"), "clips": len(batch), "class_counts": np.bincount(batch.labels).tolist()})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdrl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON config file (sections network, td, optim, data, run)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. td.lambda=3e-4")
        return p

    p = with_config(sub.add_parser("train", help="train one model, streaming JSON-lines metrics"))
    p.add_argument("--out", help="directory for metrics.jsonl, best.ckpt and config.json")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("eval", help="evaluate a checkpoint on the validation split"))
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("ablate", help="run an ablation grid"))
    p.add_argument("--grid", choices=sorted(ablate_mod.PRESETS), default="table4")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="write full results as JSON")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = with_config(sub.add_parser("export", help="write enhancement / diversity CSVs for one clip"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip-seed", type=int, default=0)
    p.add_argument("--clip-class", type=int, default=0)
    p.add_argument("--what", choices=("enhancement", "diversity", "both"), default="both")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = with_config(sub.add_parser("gen-data", help="write the train/val clip files"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, FormatError, CheckpointMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
