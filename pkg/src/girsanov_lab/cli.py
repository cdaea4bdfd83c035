"""Command line entry point: ``girsanov-lab run CONFIG`` and ``girsanov-lab list-models``.

Exit status: 0 when every pass flag is true, 1 when any flag fails,
2 on configuration errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .exceptions import ConfigError
from .harness import read_config, run_experiment, write_report
from .models import REGISTRY

log = logging.getLogger("girsanov_lab")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _build_parser():
    parser = argparse.ArgumentParser(prog="girsanov-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run every experiment section of a config file")
    run.add_argument("config", type=Path)
    run.add_argument("--seed", type=int, default=None, help="override the master seed of every section")
    run.add_argument("--out", type=Path, default=Path("."), help="output directory")
    run.add_argument("--format", choices=("csv", "json"), default="csv")
    sub.add_parser("list-models", help="list registered coefficient models")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = _build_parser().parse_args(argv)
    if args.command == "list-models":
        for name, (_, description) in REGISTRY.items():
            print(f"{name:20s} {description}")
        return EXIT_OK

    try:
        configs = read_config(args.config.read_text(encoding="utf-8"), seed=args.seed)
    except OSError as exc:
        log.error("cannot read %s: %s", args.config, exc)
        return EXIT_CONFIG
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG

    args.out.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    for cfg in configs:
        try:
            report = run_experiment(cfg)
        except ConfigError as exc:
            log.error("[%s] config error: %s", cfg.name, exc)
            return EXIT_CONFIG
        path = write_report(report, args.out / (cfg.output or cfg.name), args.format)
        verdict = "PASS" if report.all_passed else "FAIL"
        log.info("[%s] %s in %.2fs -> %s", cfg.name, verdict, report.wall_clock, path)
        if not report.all_passed:
            status = EXIT_FAILED
    return status


if __name__ == "__main__":
    sys.exit(main())
