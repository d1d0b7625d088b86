"""Command line entry point: ``amekd run|validate|version``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .config import ConfigError, load_config, validate
from .errors import DivergenceError

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_DIVERGED = 3
EXIT_NO_OUTPUT_DIR = 4


def _cmd_run(args) -> int:
    from .recipes import run_experiment

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        for line in exc.diagnostics:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_PARSE
    out_dir = cfg.resolved_output_dir()
    if not out_dir.is_dir():
        print(f"output directory does not exist: {out_dir}", file=sys.stderr)
        return EXIT_NO_OUTPUT_DIR
    try:
        manifest = run_experiment(cfg, out_dir)
    except DivergenceError as exc:
        print(f"diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(json.dumps({"output_dir": str(out_dir), "outputs": manifest["outputs"]}, indent=2))
    return EXIT_OK


def _cmd_validate(args) -> int:
    report = validate(args.config)
    print(json.dumps(report, indent=2))
    return EXIT_OK if report["valid"] else EXIT_PARSE


def _cmd_version(args) -> int:
    print(__version__)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amekd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the recipe named in a config file")
    p_run.add_argument("config")
    p_run.set_defaults(func=_cmd_run)
    p_val = sub.add_parser("validate", help="check a config file without running it")
    p_val.add_argument("config")
    p_val.set_defaults(func=_cmd_validate)
    p_ver = sub.add_parser("version", help="print the library version")
    p_ver.set_defaults(func=_cmd_version)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
