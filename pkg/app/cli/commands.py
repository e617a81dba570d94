# app/cli/commands.py
import argparse
import csv
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from config import Config
from app import __version__, configure_logging
from app.services.errors import (
    ConfigError,
    DimensionError,
    FormatError,
    LabError,
    ScheduleError,
    ScheduleMismatchError,
)
from app.services.experiment import (
    GRID_KEYS,
    ExperimentConfig,
    ExperimentRunner,
    load_experiment_config,
    run_ablation,
    run_experiment,
)
from app.services.inversion import METHODS, NAIVE, SPDINV
from app.services.report import load_report, print_report_statistics, write_gap_table, write_json
from app.services.sampler import generate
from app.services.storage import save_model, save_trajectory

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUN_FAILED = 1
EXIT_USAGE = 2

# usage, config and file-format problems exit 2; anything raised while running exits 1
USAGE_ERRORS = (ConfigError, DimensionError, FormatError, ScheduleError, ScheduleMismatchError)


def error_line(kind: str, message: str) -> str:
    return f"error={kind} message={json.dumps(str(message))}"


class LabArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose failures end with one machine-parsable line"""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(error_line("UsageError", message), file=sys.stderr)
        sys.exit(EXIT_USAGE)


def parse_grid(entries: Optional[Sequence[str]]) -> Dict[str, List[str]]:
    """['k=5,25,50', 'eta=0.001,0.1'] -> {'k': [...], 'eta': [...]}"""
    grid: Dict[str, List[str]] = {}
    for entry in entries or ():
        key, sep, values = entry.partition("=")
        key = key.strip()
        if not sep or not values.strip():
            raise ConfigError("grid", f"expected key=v1,v2,..., got {entry!r}")
        if key.lower() in GRID_KEYS:
            key = key.lower()
        if key not in GRID_KEYS:
            raise ConfigError(f"grid.{key}", f"unknown grid key, expected one of {list(GRID_KEYS)}")
        grid[key] = [value.strip() for value in values.split(",") if value.strip()]
    return grid


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment file (.json, .yaml or .yml)")
    common.add_argument("--method", action="append", choices=METHODS,
                        help="inversion method; repeat to run several")
    common.add_argument("--seed", type=int, help="base seed for every trial")
    common.add_argument("--trials", type=int, help="number of trials")
    common.add_argument("--out", help=f"output directory (default under {Config.OUTPUT_ROOT})")
    common.add_argument("--budget-matched", action="store_true", default=None,
                        help="give the fixed-round baseline the spdinv call budget per step")
    common.add_argument("--stop-gradient", action="store_true", default=None,
                        help="treat the noise estimate as constant inside each gradient round")
    common.add_argument("--workers", type=int, help="trial worker threads")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")

    parser = LabArgumentParser(prog="spdinv-lab",
                               description="Diffusion inversion lab: naive DDIM, AIDI and SPDInv")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=LabArgumentParser)
    sub.required = True

    sub.add_parser("generate", parents=[common], help="generate ground-truth trajectories")
    sub.add_parser("invert", parents=[common], help="invert generated data with one method")
    sub.add_parser("roundtrip", parents=[common], help="invert, regenerate and compare all methods")
    sub.add_parser("edit", parents=[common], help="edit-divergence comparison under target conditions")
    ablate = sub.add_parser("ablate", parents=[common], help="one-at-a-time hyper-parameter ablation")
    ablate.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                        help=f"grid values, keys {list(GRID_KEYS)}; repeatable")
    report = sub.add_parser("report", parents=[common], help="summarize a finished run")
    report.add_argument("--in", dest="in_dir", required=True, help="run directory holding report.json")
    report.add_argument("--plot", help="write the flat (t, method, gap) table here")
    return parser


def resolve_config(args) -> ExperimentConfig:
    """Config file first, then command-line flags on top"""
    config = load_experiment_config(args.config) if args.config else ExperimentConfig()
    inversion = {"stop_gradient": True} if args.stop_gradient else None
    return config.with_overrides(
        seed=args.seed,
        trials=args.trials,
        methods=args.method,
        budget_matched=args.budget_matched,
        inversion=inversion,
        workers=args.workers,
    )


def output_dir(args, config: ExperimentConfig) -> str:
    return args.out or config.output_dir or os.path.join(Config.OUTPUT_ROOT, args.command)


def cmd_generate(args) -> int:
    config = resolve_config(args)
    out = output_dir(args, config)
    runner = ExperimentRunner(config)
    files = []
    for index in range(config.trials):
        rng = np.random.default_rng([config.seed, index])
        z_star = rng.standard_normal(runner.predictor.dim)
        source, _ = runner.pairs[index % len(runner.pairs)]
        truth = generate(z_star, source, runner.predictor, runner.schedule, config.guidance_scale)
        path = os.path.join(out, "trajectories", f"trial_{index:04d}_truth.traj")
        files.append(save_trajectory(path, truth))
    save_model(os.path.join(out, "model.bin"), runner.predictor, config.seed)
    write_json(os.path.join(out, "generate.json"), {
        "config": config.to_dict(),
        "schedule_hash": runner.schedule.hash,
        "trajectories": [os.path.relpath(path, out) for path in files],
    })
    logger.info("generated %d trajectories in %s", len(files), out)
    return EXIT_OK


def cmd_invert(args) -> int:
    config = resolve_config(args)
    if not args.method:
        config = config.with_overrides(methods=[SPDINV])
    run_experiment(config, output_dir(args, config))
    return EXIT_OK


def cmd_roundtrip(args) -> int:
    config = resolve_config(args)
    out = output_dir(args, config)
    result = run_experiment(config, out)
    for method, report in result.reports.items():
        logger.info("%s round trip: mse %s, psnr %s", method,
                    report.reconstruction_mse, report.reconstruction_psnr)
    return EXIT_OK


def cmd_edit(args) -> int:
    config = resolve_config(args)
    out = output_dir(args, config)
    result = run_experiment(config, out)

    path = os.path.join(out, "edit_table.csv")
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["trial", "method", "source", "target", "edit_divergence"])
        for outcome in result.outcomes:
            for method, method_outcome in outcome.methods.items():
                writer.writerow([outcome.index, method, outcome.source, outcome.target,
                                 repr(method_outcome.edit_divergence)])

    if SPDINV in result.reports and NAIVE in result.reports:
        pairs = [(o.methods[SPDINV], o.methods[NAIVE]) for o in result.outcomes
                 if SPDINV in o.methods and NAIVE in o.methods]
        wins = sum(1 for s, n in pairs if s.edit_divergence < n.edit_divergence)
        logger.info("spdinv edit divergence below naive on %d of %d trials", wins, len(pairs))
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = resolve_config(args)
    grid = parse_grid(args.grid) or None
    out = output_dir(args, config)
    rows = run_ablation(config, grid, out)
    logger.info("ablation finished: %d rows", len(rows))
    return EXIT_OK


def cmd_report(args) -> int:
    report = load_report(args.in_dir)
    if args.plot:
        per_method = {method: entry.get("per_step_gap") or [] for method, entry in report["reports"].items()}
        write_gap_table(args.plot, per_method)
        logger.info("wrote plot table %s", args.plot)
    print_report_statistics(report)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "invert": cmd_invert,
    "roundtrip": cmd_roundtrip,
    "edit": cmd_edit,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level or Config.LOG_LEVEL)

    try:
        return COMMANDS[args.command](args)
    except USAGE_ERRORS as exc:
        print(error_line(type(exc).__name__, exc), file=sys.stderr)
        return EXIT_USAGE
    except LabError as exc:
        print(error_line(type(exc).__name__, exc), file=sys.stderr)
        return EXIT_RUN_FAILED
    except OSError as exc:
        print(error_line(type(exc).__name__, exc), file=sys.stderr)
        return EXIT_USAGE
