"""Command-line entry point: ``gibbs-drift <subcommand> --config run.json``.

Exit codes: 0 success, 1 invalid configuration, 2 computation error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_COMPUTE = 2
EXIT_VERIFY = 3

SUBCOMMANDS = ("drift-field", "optimize", "verify", "sample-terminal")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gibbs-drift", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the JSON run configuration")
        p.add_argument("--output-dir", help="run directory (overrides config output_dir)")
        p.add_argument("--seed", type=int, help="master seed (overrides config master_seed)")
        p.add_argument("--threads", type=int,
                       help="numeric backend threads, 0 = auto (env GIBBS_DRIFT_THREADS)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # Thread variables must be set before the numeric libraries load.
    from . import harness  # noqa: PLC0415

    try:
        harness.configure_threads(args.threads)
        cfg = harness.with_seed(harness.load_config(args.config), args.seed)
        if cfg.mode != args.command:
            raise harness.ConfigError(
                f"config mode {cfg.mode!r} does not match subcommand {args.command!r}")
        out = harness.execute(cfg, args.output_dir)
    except (harness.ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except harness.VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except Exception as exc:  # noqa: BLE001 - reported as a computation error
        print(f"computation error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    print(out)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
