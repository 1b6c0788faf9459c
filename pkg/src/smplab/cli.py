"""Command-line entry point.

Subcommands mirror the experiment kinds plus ``replay``.  Exit codes:
0 verdict pass, 1 verdict fail or replay mismatch, 2 configuration error,
3 numerical error.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, ReplayMismatch, SmplabError
from .harness import EXIT_CONFIG, EXIT_FAIL, EXIT_NUMERICAL, EXPERIMENTS, parse_config, replay, run


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smplab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in EXPERIMENTS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", required=True, help="INI experiment config")
        p.add_argument("--seed", type=int, default=None, help="override [mc] seed")
        p.add_argument("--paths", type=int, default=None, help="override [mc] n_paths")
        p.add_argument("--out", default="out", help="output directory (default: out)")
    p = sub.add_parser("replay", help="re-run a report and verify bit-identical numbers")
    p.add_argument("report", help="path to a report.json produced by a run")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            code = replay(args.report)
            print("replay: payload identical")
            return code
        cfg = parse_config(args.config, kind=args.command, overrides={"seed": args.seed, "n_paths": args.paths})
        result = run(cfg, out_dir=args.out)
        with open(result.report_path.parent / "summary.txt") as fh:
            sys.stdout.write(fh.read())
        return result.exit_code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ReplayMismatch as exc:
        print(f"replay mismatch: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except SmplabError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
