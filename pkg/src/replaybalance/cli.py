"""Command-line entry point: run, sweep, probe."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from typing import Optional, Sequence

from .buffers import ConfigError, CounterDesign
from .experiment import (BUFFERS, SWEEP_AXES, ExperimentConfig, load_config, run_experiment,
                         run_sweep)
from .probe import acceptance_curve, empirical_membership
from .trainer import METHODS


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value file; flags below override it")
    p.add_argument("--method", choices=sorted(METHODS))
    p.add_argument("--buffer", choices=BUFFERS)
    p.add_argument("--task", help="r<i>, c<i> or s<i>, e.g. c1")
    p.add_argument("--seeds", type=int)
    p.add_argument("--root-seed", type=int)
    p.add_argument("--cycles", type=int, help="cycles per task (per half when switched)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, default=1, help="parallel seed processes")


def _build_config(args) -> ExperimentConfig:
    overrides = {"method": args.method, "buffer": args.buffer, "task": args.task,
                 "seeds": args.seeds, "root_seed": args.root_seed, "cycles": args.cycles}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    if args.config:
        return load_config(args.config, **overrides)
    return ExperimentConfig.from_mapping({k: v for k, v in overrides.items() if v is not None})


def _floats(text: Optional[str]):
    return None if text is None else [float(v) for v in text.replace(",", " ").split()]


def _write_rows(rows: list[dict], out):
    writer = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)


def cmd_run(args) -> int:
    cfg = _build_config(args)
    summary, _ = run_experiment(cfg, args.out, args.workers)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_sweep(args) -> int:
    cfg = _build_config(args)
    designs = args.designs.split(",") if args.designs else None
    rows = run_sweep(cfg, args.axis, _floats(args.values), designs, args.out, args.workers,
                     args.balance_threshold)
    _write_rows(rows, sys.stdout)
    return 0


def cmd_probe(args) -> int:
    design = CounterDesign(args.design, args.q)
    if args.trials:
        marks = [int(m) for m in _floats(args.marks)] if args.marks else [1, args.offers]
        rows = []
        for mark in marks:
            r = empirical_membership(design, args.capacity, args.offers, mark, args.trials, args.seed)
            rows.append({"mark": mark, "offers": args.offers, "empirical": r.empirical,
                         "analytic": r.analytic, "trials": r.trials, "z_score": r.z_score})
    else:
        table = acceptance_curve(design, args.capacity, args.offers, args.stride)
        rows = [{"n": int(n), "acceptance": p} for n, p in table]
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            _write_rows(rows, fh)
    else:
        _write_rows(rows, sys.stdout)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="replaybalance",
                                     description="Replay buffers with adaptive rehearsal weighting.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one condition over several seeds")
    _add_config_args(run)
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="repeat a condition over a parameter grid")
    _add_config_args(sweep)
    sweep.add_argument("--axis", choices=SWEEP_AXES, required=True)
    sweep.add_argument("--values", help="comma-separated grid; default depends on the axis")
    sweep.add_argument("--designs", help="comma-separated counter kinds for --axis design")
    sweep.add_argument("--balance-threshold", type=float, default=90.0,
                       help="both half accuracies must reach this on switched tasks")
    sweep.set_defaults(func=cmd_sweep)

    probe = sub.add_parser("probe", help="acceptance curve or Monte Carlo retention check")
    probe.add_argument("--design", default="qlog", choices=["qlog", "lin", "exp"])
    probe.add_argument("--q", type=float, default=1.0)
    probe.add_argument("--capacity", type=int, default=512)
    probe.add_argument("--offers", type=int, default=10000)
    probe.add_argument("--stride", type=int, default=100)
    probe.add_argument("--trials", type=int, default=0,
                       help="if set, simulate this many buffers instead of tabulating N/f(n)")
    probe.add_argument("--marks", help="comma-separated token indices to report")
    probe.add_argument("--seed", type=int, default=0)
    probe.add_argument("--out", help="CSV file; default stdout")
    probe.set_defaults(func=cmd_probe)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        parser.error(str(exc))
    return 2


if __name__ == "__main__":
    sys.exit(main())
