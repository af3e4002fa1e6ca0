"""Command-line entry point: ``aclogit {run,equilibrium,dynamics,validate-game}``.

Log verbosity comes from the ``ACLOGIT_LOG`` environment variable
(``DEBUG``, ``INFO``, ``WARNING``; default ``INFO``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Optional, Sequence

from .errors import ConfigurationError
from .harness import COMMANDS, EXIT_CONFIG, load_config

log = logging.getLogger("aclogit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aclogit", description="Actor-critic logit learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "run": "run the learner for every seed; writes seed_<s>.jsonl and summary.json",
        "equilibrium": "solve for logit equilibria; writes equilibria.json",
        "dynamics": "integrate the logit best-response flow; writes dynamics.jsonl",
        "validate-game": "spot-check the potential identity; writes validation.json",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--output", default=None, help="override output_dir")
        p.add_argument("--seed", type=int, default=None, help="run a single seed instead of the configured list")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("ACLOGIT_LOG", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        config = load_config(args.config, args.output, args.seed)
    except ConfigurationError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](config)
    except KeyboardInterrupt:
        log.error("interrupted; partial output left in %s", config.output_dir)
        return 130


if __name__ == "__main__":
    sys.exit(main())
