"""Command-line front end: ``run``, ``study`` and ``ablate``.

Every subcommand reads an optional YAML config (empty or missing means the
nominal scenario) and writes CSV files under ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError, ScenarioConfig, load_config
from .scenario import (
    ERROR_PAIRS,
    AggregationError,
    RunLog,
    ScheduleError,
    SimulationDiverged,
    aggregate_runs,
    run_ablation,
    simulate_run,
    steady_state_mask,
)

U64_MAX = 2**64 - 1
EXIT_DIVERGED = 2
SUMMARY_COLUMNS = [*ERROR_PAIRS, "err_pos_L", "objective", "kkt", "cpu_ms", "fallback"]


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value <= U64_MAX:
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer, got {text}")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML scenario file (empty file = defaults)")
    common.add_argument("--seed", type=_seed, help="base RNG seed (u64)")
    common.add_argument("--runs", type=_positive, help="number of seeded runs")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--no-warm-start", action="store_true",
                        help="cold-start every sample instead of shifting the last solution")
    common.add_argument("--test-mode", type=_positive, metavar="SQP_ITERS",
                        help="replace the wall-clock budget with a fixed SQP iteration cap")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="formation-nmpc",
                                     description="Leader-follower quadrotor formation NMPC simulator.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="single closed-loop run")
    sub.add_parser("study", parents=[common], help="multi-run statistics")
    sub.add_parser("ablate", parents=[common], help="warm-start on/off comparison over segment C")
    return parser


def resolve_config(args: argparse.Namespace) -> ScenarioConfig:
    config = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.runs is not None:
        changes["runs"] = args.runs
    if args.out is not None:
        changes["out_dir"] = str(args.out)
    if args.no_warm_start:
        changes["warm_start"] = False
    if args.test_mode is not None:
        changes["test_mode"] = args.test_mode
    return config.replace(**changes) if changes else config


def _seeds(config: ScenarioConfig) -> list[int]:
    return [(config.seed + k) % (U64_MAX + 1) for k in range(config.runs)]


def _summarize(log: RunLog) -> str:
    lines = []
    for seg in dict.fromkeys(log.segments):
        mask = steady_state_mask(log, seg)
        parts = " ".join(f"{c}={np.mean(log.column(c)[mask]):.4g}" for c in SUMMARY_COLUMNS)
        lines.append(f"  {seg}: {parts}")
    return "\n".join(lines)


def cmd_run(config: ScenarioConfig) -> int:
    out = Path(config.out_dir)
    try:
        log = simulate_run(config, config.seed)
        status = 0
    except SimulationDiverged as exc:
        print(f"run diverged: {exc}", file=sys.stderr)
        log, status = exc.log, EXIT_DIVERGED
    path = out / f"run_seed{config.seed}.csv"
    log.to_csv(path)
    print(f"wrote {path} ({len(log.data)} steps)")
    print("steady-state means per segment:")
    print(_summarize(log))
    return status


def cmd_study(config: ScenarioConfig) -> int:
    out = Path(config.out_dir)
    logs, diverged = [], []
    for seed in _seeds(config):
        try:
            log = simulate_run(config, seed)
            logs.append(log)
        except SimulationDiverged as exc:
            print(f"seed {seed} diverged: {exc}", file=sys.stderr)
            log = exc.log
            diverged.append(seed)
        log.to_csv(out / f"run_seed{seed}.csv")
    if not logs:
        print("every run diverged; no aggregate written", file=sys.stderr)
        return EXIT_DIVERGED
    agg = aggregate_runs(logs)
    agg.to_csv(out / "aggregate.csv")
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        metrics = list(next(iter(agg.summaries.values())))
        w = csv.writer(fh)
        w.writerow(["segment", *metrics])
        for seg, values in agg.summaries.items():
            w.writerow([seg, *(f"{values[m]:.9g}" for m in metrics)])
    print(f"{len(logs)} runs aggregated into {out / 'aggregate.csv'}")
    for seg, values in agg.summaries.items():
        print(f"  {seg}: " + " ".join(f"{m}={values[m]:.4g}" for m in SUMMARY_COLUMNS))
    return EXIT_DIVERGED if diverged else 0


def cmd_ablate(config: ScenarioConfig) -> int:
    out = Path(config.out_dir)
    records = run_ablation(config, _seeds(config))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "objective_C_warm", "objective_C_cold", "warm_diverged", "cold_diverged"])
        for r in records:
            w.writerow([r.seed, f"{r.warm:.9g}", f"{r.cold:.9g}", int(r.warm_diverged), int(r.cold_diverged)])
    warm = np.array([r.warm for r in records])
    cold = np.array([r.cold for r in records])
    print(f"segment C mean objective over {len(records)} paired seeds:")
    print(f"  warm start: {np.nanmean(warm):.6g}")
    print(f"  cold start: {np.nanmean(cold):.6g}")
    print(f"  warm start lower on {sum(r.warm_better for r in records)}/{len(records)} seeds")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        handler = {"run": cmd_run, "study": cmd_study, "ablate": cmd_ablate}[args.command]
        return handler(config)
    except (ConfigError, ScheduleError, AggregationError, OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
