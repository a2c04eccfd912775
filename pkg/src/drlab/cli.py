"""Command-line entry point: ``drlab <verb> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bench import ablate, dump_embeddings, run_experiment
from .checkpoint import inspect_checkpoint, load_checkpoint
from .config import PRESETS, build_config, config_schema
from .datagen import Dataset, generate_stream
from .errors import ConfigurationError, DrlabError
from .gradcheck import sweep

GRADCHECK_TOLERANCE = 1e-4


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def _csv_list(text: str) -> list[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named hyperparameter preset")
    p.add_argument("--seed", type=_u64, help="run seed (overrides $DRL_SEED and the config file)")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drlab", description="Desk-scale class-incremental learning lab.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-stage progress")
    verbs = parser.add_subparsers(dest="verb", required=True)

    run = verbs.add_parser("run", help="full experiment: pretrain, every stage, metrics and checkpoints")
    _config_flags(run)

    grad = verbs.add_parser("gradcheck", help="finite-difference sweep over every trainable parameter group")
    grad.add_argument("--seed", type=_u64, default=0)
    grad.add_argument("--full", action="store_true", help="also sweep every fusion and attention mode")
    grad.add_argument("--h", type=float, default=1e-5, help="central-difference step")

    abl = verbs.add_parser("ablate", help="cartesian sweep over fusion/attention/loss, one summary CSV")
    _config_flags(abl)
    abl.add_argument("--fusion", type=_csv_list, default=["sum", "gate_part", "gate_adapt"])
    abl.add_argument("--attention", type=_csv_list, default=["n_att", "r_att"])
    abl.add_argument("--loss", type=_csv_list, default=["das"])
    abl.add_argument("--seeds", type=_csv_list, default=["0", "1", "2", "3", "4"])

    dump = verbs.add_parser("dump-embeddings", help="write F_t for every sample of the seen stages as CSV")
    dump.add_argument("checkpoint", type=Path)
    dump.add_argument("--out", type=Path, required=True, help="destination CSV")
    dump.add_argument("--split", choices=["train", "test"], default="test")

    insp = verbs.add_parser("inspect", help="print checkpoint metadata as JSON")
    insp.add_argument("checkpoint", type=Path)

    verbs.add_parser("schema", help="print the run-configuration JSON schema")
    return parser


def _cmd_run(args) -> int:
    config = build_config(args.config, args.preset, args.seed, args.out)
    result = run_experiment(config)
    for t, acc in enumerate(result.metrics.accuracies, start=1):
        print(f"stage {t}: A_t = {acc:.2f}%")
    print(f"A_bar = {result.metrics.A_bar:.2f}%  A_T = {result.metrics.A_T:.2f}%  ({result.out_dir})")
    return 0


def _cmd_gradcheck(args) -> int:
    results, seconds = sweep(seed=args.seed, h=args.h, full=args.full)
    for r in results:
        print(f"{r.loss:8s} alpha={r.alpha:<4} {r.fusion_mode:10s} {r.attention_mode:6s} {r.group:11s} {r.max_rel_error:.3e}")
    worst = max(r.max_rel_error for r in results)
    ok = worst <= GRADCHECK_TOLERANCE
    print(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'} at {GRADCHECK_TOLERANCE:g}) in {seconds:.1f}s")
    return 0 if ok else 1


def _cmd_ablate(args) -> int:
    config = build_config(args.config, args.preset, None, args.out)
    try:
        seeds = [_u64(s) for s in args.seeds]
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise ConfigurationError(f"bad --seeds: {exc}") from exc
    runs = ablate(config, args.fusion, args.attention, args.loss, seeds, config.out_dir)
    print(f"{len(runs)} runs; summary at {Path(config.out_dir) / 'summary.csv'}")
    return 0


def _cmd_dump(args) -> int:
    state, _, config = load_checkpoint(args.checkpoint)
    if config is None:
        raise ConfigurationError("checkpoint carries no run configuration; cannot regenerate its data")
    _, stages = generate_stream(config.stream_spec)
    seen = [getattr(s, args.split) for s in stages[: state.stage_index]]
    rows = dump_embeddings(state, Dataset.concat(seen), args.out)
    print(f"{rows} rows written to {args.out}")
    return 0


def _cmd_inspect(args) -> int:
    print(json.dumps(inspect_checkpoint(args.checkpoint), indent=2, sort_keys=True))
    return 0


def _cmd_schema(args) -> int:
    print(json.dumps(config_schema(), indent=2, sort_keys=True))
    return 0


COMMANDS = {
    "run": _cmd_run,
    "gradcheck": _cmd_gradcheck,
    "ablate": _cmd_ablate,
    "dump-embeddings": _cmd_dump,
    "inspect": _cmd_inspect,
    "schema": _cmd_schema,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.verb](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (DrlabError, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
