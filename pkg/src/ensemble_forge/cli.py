"""``ensemble-forge`` command line.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from ensemble_forge import harness
from ensemble_forge.errors import ConfigError, DataError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("ensemble_forge")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ensemble-forge", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the configured experiments and write CSV curves")
    run.add_argument("--config", help="key=value config file; flags override its entries")
    # every config key has a flag of the same name (underscores become dashes)
    run.add_argument("--data-dir")
    run.add_argument("--output-dir")
    run.add_argument("--variant", action="append", choices=harness.ALL_VARIANTS,
                     help="repeatable; default: all three")
    run.add_argument("--n-models")
    run.add_argument("--n-grid", help="comma-separated N values, e.g. 1,2,4,8")
    run.add_argument("--checkpoints", help="comma-separated sweep counts, e.g. 1,2,6")
    run.add_argument("--train-subset", help="row count or 'full'")
    run.add_argument("--test-subset", help="row count or 'full'")
    run.add_argument("--subset-seed")
    run.add_argument("--master-seed")
    run.add_argument("--learning-rate")
    run.add_argument("--init-scale")
    run.add_argument("--activation")
    run.add_argument("--mask-source")
    run.add_argument("--workers")
    run.add_argument("--cache-dir")
    run.add_argument("--resume", action="store_const", const="true")
    run.add_argument("--record-timing", action="store_const", const="true")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    out = {}
    for key in harness.PARSERS:
        value = getattr(args, key, None)
        if value is None:
            continue
        if key == "variant":
            value = ",".join(value)
        out[key] = harness.parse_value(key, value, where=f"--{key.replace('_', '-')}")
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        overrides = _overrides(args)
        if args.config:
            cfg = harness.load_config(args.config, overrides)
        else:
            cfg = harness.build_config(overrides=overrides)
        harness.run_experiment(cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except Exception:
        log.exception("run failed")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
