"""Command-line entry point: ``pcattack {train,sweep,defend,export}``.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure,
3 internal-consistency failure (an emitted sample broke its constraints).
"""

import argparse
import json
import logging
import sys

from . import harness
from .data import ParseError
from .model import WeightFormatError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CONSISTENCY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="pcattack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_help):
        p.add_argument("--config", help="YAML or JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help=out_help)

    p = sub.add_parser("train", help="train the point classifier on the synthetic dataset")
    common(p, "weight file to write (report goes to <out>.json)")

    p = sub.add_parser("sweep", help="run an attack grid and write report.{json,csv}")
    common(p, "output directory")
    p.add_argument("--weights", help="weight file (overrides config 'weights')")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("defend", help="evaluate stored sweep samples under defenses")
    common(p, "output directory")
    p.add_argument("--weights", help="weight file (overrides config 'weights')")
    p.add_argument("--results", help="sweep directory (overrides config 'results')")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("export", help="write one adversarial sample as coloured PLY")
    common(p, "PLY file to write")
    return parser


def _require(config, key, override):
    value = override or config.get(key)
    if not value:
        raise UsageError(f"missing '{key}' (config key or --{key})")
    return value


def _sweep(args, config):
    weights = _require(config, "weights", args.weights)
    spec_data = dict(config.get("sweep", {}))
    if args.seed is not None:
        spec_data["seed"] = args.seed
    spec = harness._from_dict(harness.SweepSpec, spec_data, "sweep")
    unknown = set(config) - {"weights", "sweep", "dataset"}
    if unknown:
        raise harness.ConfigError(f"unknown config sections {sorted(unknown)}")
    report = harness.run_sweep(weights, spec, args.out, harness._dataset_for(weights, config),
                               figures=not args.no_figures)
    return {"cells": len(report["cells"]), "out": args.out,
            "clean_accuracy": report["metadata"]["clean_accuracy"]}


def _defend(args, config):
    weights = _require(config, "weights", args.weights)
    results = _require(config, "results", args.results)
    defenses = harness.parse_defenses(config.get("defenses"))
    report = harness.run_defend(weights, results, defenses, args.out, figures=not args.no_figures)
    return {"rows": len(report["rows"]), "out": args.out}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = harness.load_config(args.config)
        if args.command == "train":
            summary = harness.run_train(config, args.seed, args.out)
            summary = {k: summary[k] for k in ("train_accuracy", "test_accuracy", "weights_sha256")}
        elif args.command == "sweep":
            summary = _sweep(args, config)
        elif args.command == "defend":
            summary = _defend(args, config)
        else:
            summary = harness.run_export(config, args.seed, args.out)
    except (UsageError, harness.ConfigError) as exc:
        print(f"pcattack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except harness.ConstraintViolation as exc:
        print(f"pcattack: constraint violation: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY
    except (OSError, ValueError, RuntimeError, ParseError, WeightFormatError) as exc:
        print(f"pcattack: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
