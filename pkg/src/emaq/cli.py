"""Command-line entry point: ``emaq <subcommand> [--config FILE] [--field VALUE ...]``.

Every :class:`~emaq.harness.ExperimentConfig` field is also a flag
(underscores become dashes).  Flags override the config file, which
overrides the defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from . import harness
from .errors import ConfigurationError

HELP = {
    "verify-theorems": "check the exact-operator properties on a tabular MDP and write a report",
    "fit-behavior": "fit the autoregressive behavior model to a dataset",
    "gen-data": "generate an offline dataset file",
    "train-offline": "train a Q ensemble offline against a frozen behavior model",
    "eval": "evaluate a trained ensemble (or the behavior model alone at N=1)",
    "sweep-n": "train and evaluate across a list of N values and seeds",
    "online": "run the alternating collect/train loop from scratch",
    "summarize": "aggregate summary.json files from several runs into one CSV",
}


def _field_flags(parser):
    for f in dataclasses.fields(harness.ExperimentConfig):
        if f.name == "mode":
            continue
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar=f.name.upper(),
                            help=argparse.SUPPRESS if f.name in ("smoothing",) else None)


def build_parser():
    parser = argparse.ArgumentParser(prog="emaq", description="Expected-Max Q-Learning experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in harness.MODES:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", default=None, help="JSON config file")
        _field_flags(p)
    p = sub.add_parser("summarize", help=HELP["summarize"])
    p.add_argument("runs", nargs="+", help="run directories containing summary.json")
    p.add_argument("--out", required=True, help="output CSV path")
    return parser


def _check_threads():
    value = os.environ.get("EMAQ_THREADS")
    if value is not None and (not value.isdigit() or int(value) < 1):
        raise ConfigurationError(f"EMAQ_THREADS must be a positive integer, got {value!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "summarize":
        try:
            rows = harness.summarize(args.runs, args.out)
        except ConfigurationError as exc:
            print(json.dumps(exc.to_dict()), file=sys.stderr)
            return 1
        for name, n, mean, std in rows:
            print(f"{name}\t{mean:.6g}\t{std:.6g}\t(n={n})")
        return 0
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        _check_threads()
        config = harness.load_config(args.config, overrides, mode=args.command)
    except ConfigurationError as exc:
        # no run directory yet, so the report goes to stderr only
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 1
    status = harness.run(config, args.config)
    if status == 0 and config.mode != "gen-data":
        summary = os.path.join(config.out, "summary.json")
        if os.path.exists(summary):
            with open(summary, encoding="utf-8") as fh:
                print(json.dumps(json.load(fh).get("metrics", {}), indent=2, sort_keys=True))
    return status


if __name__ == "__main__":
    sys.exit(main())
