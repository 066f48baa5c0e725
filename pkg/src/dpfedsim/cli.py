"""Command-line entry point: ``dpfedsim run | sweep | gen-data``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields

from .data import DEFAULT_PROFILES, generate_trace, write_trace_csv
from .errors import ConfigError, DataError
from .experiment import (
    ExperimentConfig,
    load_config,
    run_experiment,
    sweep_epsilon,
    write_run_artifacts,
    write_sweep_artifacts,
)

log = logging.getLogger("dpfedsim")


def _config_help() -> str:
    lines = ["config keys (key = value per line, or a JSON object) and defaults:"]
    for f in fields(ExperimentConfig):
        lines.append(f"  {f.name} = {f.default}")
    return "\n".join(lines)


def _parse_epsilons(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad epsilon list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpfedsim",
        description="Federated time-series transformer training under differential privacy.",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one federated experiment", epilog=_config_help(),
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    run.add_argument("--config", help="config file (key = value or JSON)")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory")

    sweep = sub.add_parser("sweep", help="final accuracy over a list of epsilon values", epilog=_config_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
    sweep.add_argument("--config")
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--out")
    sweep.add_argument("--epsilons", type=_parse_epsilons, default=[round(0.1 * i, 1) for i in range(1, 11)],
                       help="comma-separated list (default 0.1,...,1.0)")

    gen = sub.add_parser("gen-data", help="write a synthetic vehicle trace as CSV")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--steps", type=int, default=500)
    gen.add_argument("--profile", type=int, default=0, help=f"profile index 0..{len(DEFAULT_PROFILES) - 1}")
    gen.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "gen-data":
            if not 0 <= args.profile < len(DEFAULT_PROFILES):
                raise ConfigError(f"profile must lie in 0..{len(DEFAULT_PROFILES) - 1}")
            trace = generate_trace(args.seed, args.steps, DEFAULT_PROFILES[args.profile])
            write_trace_csv(trace, args.out)
            return 0
        config = load_config(args.config, {"seed": args.seed, "output_dir": args.out})
        if args.command == "run":
            result = run_experiment(config)
            out = write_run_artifacts(result, config.output_dir)
            log.info("final global accuracy %.4f, artifacts in %s", result.final_accuracy, out)
        else:
            rows = sweep_epsilon(config, args.epsilons)
            out = write_sweep_artifacts(rows, config, config.output_dir)
            log.info("sweep of %d points written to %s", len(rows), out)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"filesystem error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
