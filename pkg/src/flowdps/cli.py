"""Command-line entry point: ``flowdps {verify,sample,solve,train,report}``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .harness.config import ConfigError, load_config
from .harness.experiments import ExperimentError, run_experiment
from .harness.report import report
from .harness.verify import format_results, verify

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowdps", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    v = sub.add_parser("verify", help="run the invariant suites")
    v.add_argument("--full", action="store_true", help="include the Monte-Carlo suites")
    v.add_argument("--seed", type=int, default=0)
    for name, text in (
        ("sample", "unconditional sampling from the prior's flow"),
        ("solve", "posterior sampling for an inverse problem"),
        ("train", "fit a network velocity by conditional flow matching"),
    ):
        s = sub.add_parser(name, help=text)
        s.add_argument("config", type=Path)
        s.add_argument("-o", "--output", type=Path, help="output directory (overrides the config)")
    r = sub.add_parser("report", help="summarise metrics.csv files under a directory")
    r.add_argument("directory", type=Path)
    return p


def _run(args) -> int:
    try:
        cfg = load_config(args.config)
        cfg = replace(cfg, experiment=replace(cfg.experiment, mode=args.command))
        out = args.output if args.output is not None else Path(cfg.experiment.output)
        rep = run_experiment(cfg, out, base_dir=args.config.parent)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExperimentError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"{len(rep.rows)} row(s) written to {out / 'metrics.csv'}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "verify":
        results = verify("full" if args.full else "fast", seed=args.seed)
        print(format_results(results))
        return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL
    if args.command == "report":
        try:
            print(report(args.directory))
        except (FileNotFoundError, ValueError) as exc:
            print(f"report failed: {exc}", file=sys.stderr)
            return EXIT_FAIL
        return EXIT_OK
    return _run(args)


if __name__ == "__main__":
    sys.exit(main())
