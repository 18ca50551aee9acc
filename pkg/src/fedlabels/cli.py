"""Command line entry point: ``fedlabels {run,validate,oracle,gradcheck}``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import oracles
from .config import load_config
from .exceptions import ConfigurationError


def _report(results) -> int:
    failed = 0
    for name, passed, detail in results:
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        failed += not passed
    return 1 if failed else 0


def cmd_run(args) -> int:
    from .experiment import run

    config = load_config(args.config)
    table = run(config, args.output_dir)
    for row in table.aggregates:
        print(
            f"{row['dataset']} {row['method']} {row['label_mode']} L={row['labels_per_client']} E={row['local_epochs']}: "
            f"{row['mean']:.4f} [{row['ci_low']:.4f}, {row['ci_high']:.4f}]"
        )
    if table.failures:
        print(f"{len(table.failures)} cell(s) failed; see failures.json", file=sys.stderr)
        return 1
    return 0


def cmd_validate(args) -> int:
    config = load_config(args.config)
    print(f"ok: {len(config.cells())} sweep point(s) x {len(config.seeds)} seed(s)")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fedlabels", description="Federated learning with heterogeneous and private label sets.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("validate", help="parse and check a config without running it")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)
    p = sub.add_parser("oracle", help="softmax restriction, perfect combination and missing-label checks")
    p.set_defaults(func=lambda a: _report(oracles.oracle_suite()))
    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.set_defaults(func=lambda a: _report(oracles.gradcheck_suite()))
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
