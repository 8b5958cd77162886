"""Command line entry point: ``robust-transport <command> --config FILE``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments as ex
from .measures import MeasureError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robust-transport",
        description="Robust distribution learning under TV + Wasserstein corruption.")
    parser.add_argument("command", choices=["simulate", "filter", "sweep", "verify", "dro"])
    parser.add_argument("--config", required=True, help="JSON experiment configuration")
    parser.add_argument("--seed", type=int, default=None, help="override master_seed")
    parser.add_argument("--out", default=None, help="override output_dir")
    parser.add_argument("--input", default=None, help="dataset CSV for 'filter'")
    parser.add_argument("--suite", default=None, help=f"suite for 'verify': {', '.join(ex.SUITES)}")
    parser.add_argument("--data-dir", default=None, help="simulate output for 'verify --suite budgets'")
    parser.add_argument("--no-figure", action="store_true", help="skip PNG rendering")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _report_checks(checks, out_dir) -> int:
    failed = 0
    for c in checks:
        tag = "PASS" if c.passed else ("INFO" if c.informational else "FAIL")
        failed += (not c.passed) and not c.informational
        print(f"{tag} {c.name}: {c.detail}")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "verify.json", "w", encoding="utf-8") as fh:
            json.dump([vars(c) for c in checks], fh, indent=1, default=bool)
            fh.write("\n")
    return EXIT_FAIL if failed else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ex.ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg = replace(cfg, master_seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, output_dir=args.out)
        out = Path(cfg.output_dir)
        if args.command == "simulate":
            written = ex.cmd_simulate(cfg, out)
            print(f"wrote {len(written)} corrupted datasets under {out}")
        elif args.command == "filter":
            source = args.input or cfg.input
            if source is None:
                raise ex.ConfigError("filter needs --input or an 'input' config entry")
            _, report = ex.cmd_filter(cfg, source, out)
            print(f"{report.status}: kept {report.final_size} points after "
                  f"{len(report.iterations)} iterations")
        elif args.command == "sweep":
            path = ex.cmd_sweep(cfg, out, figure=not args.no_figure)
            print(f"wrote {path}")
        elif args.command == "dro":
            path = ex.cmd_dro(cfg, out, figure=not args.no_figure)
            print(f"wrote {path}")
        else:
            suite = args.suite or cfg.suite
            if suite is None:
                raise ex.ConfigError("verify needs --suite or a 'suite' config entry")
            if suite not in ex.SUITES:
                parser.error(f"unknown suite {suite!r}; choose from {', '.join(ex.SUITES)}")
            checks = ex.cmd_verify(suite, cfg.master_seed, args.data_dir or cfg.data_dir)
            return _report_checks(checks, args.out)
    except (ex.ConfigError, MeasureError, FileNotFoundError, KeyError, TypeError) as exc:
        print(f"robust-transport: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"robust-transport: error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
