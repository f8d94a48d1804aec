"""Command line entry point: ``fedunlearn run | sweep | audit``.

Exit status is 0 on success, 1 on a runtime failure and 2 on an invalid
configuration or argument.
"""

from __future__ import annotations

import argparse
import logging
import sys

from fedunlearn.errors import ConfigError
from fedunlearn.experiment import (
    cmd_audit,
    cmd_run,
    cmd_sweep,
    format_audit,
    load_config,
    output_dir,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

log = logging.getLogger("fedunlearn")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _alphas(text: str) -> list[float]:
    try:
        return [float(a) for a in text.split(",") if a.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedunlearn", description="Federated unlearning experiments.")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    run = sub.add_parser("run", help="train, unlearn, evaluate and write metric reports")
    run.add_argument("--config", required=True, help="JSON experiment config")
    sweep = sub.add_parser("sweep", help="repeat the experiment over several removal fractions")
    sweep.add_argument("--config", required=True, help="JSON experiment config")
    sweep.add_argument("--alphas", required=True, type=_alphas, help="e.g. 0,0.1,0.2,0.4,0.6")
    audit = sub.add_parser("audit", help="summarise an exported scores CSV")
    audit.add_argument("--scores", required=True, help="scores CSV written by run")
    return p


def _dispatch(args) -> None:
    if args.command == "audit":
        print(format_audit(cmd_audit(args.scores)))
        return
    config = load_config(args.config)
    out = output_dir(config)
    if args.command == "run":
        report = cmd_run(config)
        for metric in ("test_acc", "target_acc", "mia_acc"):
            u = report.metrics[(metric, "unlearned")]
            r = report.metrics[(metric, "benchmark")]
            print(f"{metric:<12} unlearned {u.mean:.4f} +- {u.std:.4f}   benchmark {r.mean:.4f} +- {r.std:.4f}")
    else:
        for row in cmd_sweep(config, args.alphas):
            print(f"alpha {row.alpha:<5g} delta_test_acc {row.delta_test_acc_vs_benchmark:+.4f}  mia_acc {row.mia_acc:.4f}")
    print(f"reports written to {out}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        _dispatch(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001 - every other failure maps to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
