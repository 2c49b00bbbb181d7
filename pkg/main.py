"""
This is the main entry point for the simulator.
It loads the configuration, runs the paired baseline/minos experiment for
every seed and writes the reports.

    python main.py run --seeds 1-7 --output-dir outputs
    python main.py pretest --seeds 1
    python main.py print-default-config > experiment.json
    python main.py verify outputs
"""

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from dotenv import load_dotenv
from joblib import Parallel, delayed
from loguru import logger
from tqdm import tqdm

import config  # Imports all settings from our config.py file
from cost import AttemptRecord
from experiment_config import ConfigError, ExperimentConfig, default_config_dict, load_config
from policy import BenchmarkResult
from reporting import (
    ComparisonReport,
    RunSummary,
    RunTrace,
    compare,
    compare_pooled,
    comparison_frame,
    pooled_time_series_frame,
    read_summary,
    read_trace,
    summarize,
    time_series_frame,
    verify_trace,
    write_excel,
    write_frame,
    write_pretest_scores,
    write_summary,
    write_trace,
)
from sim_core import InvariantViolation
from workload import CalibrationError, RunMode, resolve_threshold, run_pretest, run_simulation

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INVARIANT = 2


def configure_logging(level: str):
    logger.remove()
    logger.add(sys.stderr, level=level.upper(), format="{time:HH:mm:ss} | {level: <7} | {message}")


def parse_seeds(text: str) -> List[int]:
    """'1,2,5' or '1-7' (or a mix of both)."""
    seeds: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                low, high = (int(p) for p in part.split("-", 1))
                seeds.extend(range(low, high + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError([f"seeds: cannot parse '{part}'"])
    if not seeds:
        raise ConfigError(["seeds: empty seed list"])
    return seeds


def parse_overrides(extra: Sequence[str]) -> Dict[str, str]:
    """Turn leftover `--section.key value` / `--section.key=value` arguments into overrides."""
    overrides: Dict[str, str] = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or len(token) <= 2:
            raise ConfigError([f"unexpected argument '{token}'"])
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError([f"{key}: missing value"])
            value = extra[i + 1]
            i += 2
        overrides[key] = value
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minos-sim",
        description="Discrete-event simulation of benchmark-based instance selection on a FaaS platform.",
    )
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default: env or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("run", "paired baseline/minos runs for every seed"),
        ("pretest", "pre-test calibration only"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", type=Path, default=None, help="JSON experiment config")
        cmd.add_argument("--seeds", default=None, help="e.g. 1-7 or 1,4,9")
        cmd.add_argument("--output-dir", default=None, help="overrides the config and the env var")
        cmd.add_argument("--jobs", type=int, default=None, help="parallel seeds")
        cmd.add_argument("--policy-disabled", action="store_true", help="turn the policy off on both arms")

    cmd = sub.add_parser("print-default-config", help="dump every default as JSON")
    cmd.add_argument("--config", type=Path, default=None, help="print this config merged with the defaults")

    cmd = sub.add_parser("verify", help="re-check the invariants of written traces")
    cmd.add_argument("path", type=Path, help="output directory, seed directory or trace CSV")
    cmd.add_argument("--config", type=Path, default=None, help="used when no experiment_config.json is found")
    return parser


def resolve_config(args: argparse.Namespace, overrides: Dict[str, str]) -> ExperimentConfig:
    """Config file, then --key overrides, then the explicit flags and env var."""
    overrides = dict(overrides)
    if getattr(args, "seeds", None):
        overrides["seeds"] = json.dumps(parse_seeds(args.seeds))
    if getattr(args, "jobs", None) is not None:
        overrides["jobs"] = str(args.jobs)
    if getattr(args, "policy_disabled", False):
        overrides["policy.enabled"] = "false"
    output_dir = getattr(args, "output_dir", None) or os.environ.get(config.ENV_OUTPUT_DIR)
    if output_dir:
        overrides["output_dir"] = json.dumps(output_dir)
    return load_config(args.config, overrides)


# --- experiment ---


@dataclass
class SeedOutcome:
    seed: int
    pretest: List[BenchmarkResult]
    baseline_records: List[AttemptRecord]
    minos_records: List[AttemptRecord]
    baseline: RunSummary
    minos: RunSummary
    comparison: ComparisonReport


def run_seed(experiment: ExperimentConfig, seed: int) -> SeedOutcome:
    """Pre-test (when needed), then the minos arm and the baseline arm on the same seed."""
    threshold, samples = resolve_threshold(experiment, seed)
    minos = run_simulation(experiment, seed, RunMode.MINOS, threshold=threshold)
    baseline = run_simulation(experiment, seed, RunMode.BASELINE)

    minos_summary = summarize(RunTrace.from_result(minos, experiment))
    baseline_summary = summarize(RunTrace.from_result(baseline, experiment))
    return SeedOutcome(
        seed=seed,
        pretest=samples,
        baseline_records=baseline.attempts,
        minos_records=minos.attempts,
        baseline=baseline_summary,
        minos=minos_summary,
        comparison=compare(baseline_summary, minos_summary),
    )


def write_seed_outputs(outcome: SeedOutcome, output_dir: Path) -> Path:
    seed_dir = output_dir / config.SEED_DIR_TEMPLATE.format(seed=outcome.seed)
    for mode, records, summary in (
        (RunMode.MINOS, outcome.minos_records, outcome.minos),
        (RunMode.BASELINE, outcome.baseline_records, outcome.baseline),
    ):
        write_trace(records, seed_dir / config.TRACE_FILE_TEMPLATE.format(mode=mode.value))
        write_summary(summary, seed_dir / config.SUMMARY_FILE_TEMPLATE.format(mode=mode.value))
    write_frame(comparison_frame([outcome.comparison]), seed_dir / config.COMPARISON_FILE)
    write_frame(time_series_frame(outcome.baseline, outcome.minos), seed_dir / config.TIME_SERIES_FILE)
    return seed_dir


def _run_seeds(experiment: ExperimentConfig):
    tasks = (delayed(run_seed)(experiment, seed) for seed in experiment.seeds)
    results = Parallel(n_jobs=experiment.jobs, return_as="generator")(tasks)
    return tqdm(results, total=len(experiment.seeds), desc="Seeds", unit="seed", disable=len(experiment.seeds) < 2)


def run_experiment(experiment: ExperimentConfig) -> int:
    """Run every seed and write all outputs. Returns the process exit status."""
    output_dir = Path(experiment.output_dir)
    logger.info(f"Starting experiment over seeds {experiment.seeds} -> {output_dir}")
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
        (output_dir / config.EXPERIMENT_CONFIG_FILE).write_text(experiment.model_dump_json(indent=2), encoding="utf-8")

        outcomes: List[SeedOutcome] = []
        for outcome in _run_seeds(experiment):
            write_seed_outputs(outcome, output_dir)
            outcomes.append(outcome)
            c = outcome.comparison
            logger.info(
                f"Seed {outcome.seed}: speedup {_fmt(c.compute_speedup_pct)}%, "
                f"successes {c.baseline_successes} -> {c.minos_successes}, "
                f"cost/M {_fmt(c.baseline_cost_per_million)} -> {_fmt(c.minos_cost_per_million)}, "
                f"cheaper {c.fraction_of_time_cheaper:.0%} of the time"
            )

        pairs = [(o.baseline, o.minos) for o in outcomes]
        table = comparison_frame([o.comparison for o in outcomes] + [compare_pooled(pairs)])
        write_frame(table, output_dir / config.EXPERIMENT_COMPARISON_FILE)
        write_frame(pooled_time_series_frame(pairs), output_dir / config.EXPERIMENT_TIME_SERIES_FILE)
        if experiment.reporting.excel:
            write_excel(table, output_dir / config.EXPERIMENT_COMPARISON_XLSX)
    except InvariantViolation as e:
        logger.error(f"Invariant violated: {e}")
        return EXIT_INVARIANT
    except CalibrationError as e:
        logger.error(str(e))
        return EXIT_CONFIG
    except OSError as e:
        logger.error(f"Cannot write outputs: {e}")
        return EXIT_CONFIG

    logger.info(f"Done. Successfully saved {len(outcomes)} paired runs to {output_dir}")
    return EXIT_OK


def run_pretest_only(experiment: ExperimentConfig) -> int:
    output_dir = Path(experiment.output_dir)
    try:
        for seed in experiment.seeds:
            samples = run_pretest(experiment, seed)
            path = output_dir / config.SEED_DIR_TEMPLATE.format(seed=seed) / config.PRETEST_FILE
            write_pretest_scores(samples, path)
            logger.info(f"Saved {len(samples)} pre-test scores to {path}")
    except InvariantViolation as e:
        logger.error(f"Invariant violated: {e}")
        return EXIT_INVARIANT
    except OSError as e:
        logger.error(f"Cannot write outputs: {e}")
        return EXIT_CONFIG
    except CalibrationError as e:
        logger.error(str(e))
        return EXIT_CONFIG
    return EXIT_OK


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.2f}"


# --- verify ---


def _find_experiment_config(path: Path) -> Optional[Path]:
    for directory in [path, *path.parents] if path.is_dir() else path.parents:
        candidate = directory / config.EXPERIMENT_CONFIG_FILE
        if candidate.exists():
            return candidate
    return None


def _trace_files(path: Path) -> List[Path]:
    if path.is_file():
        return [path]
    pattern = config.TRACE_FILE_TEMPLATE.format(mode="*")
    return sorted(path.rglob(pattern))


def verify_outputs(path: Path, fallback_config: Optional[Path] = None) -> int:
    """Check every trace under `path` against its summary. Returns the exit status."""
    config_path = _find_experiment_config(path) or fallback_config
    experiment = load_config(config_path)
    traces = _trace_files(path)
    if not traces:
        logger.error(f"No trace files under {path}")
        return EXIT_CONFIG

    failures = 0
    for trace_path in traces:
        mode = trace_path.name.split("_trace")[0]
        summary_path = trace_path.with_name(config.SUMMARY_FILE_TEMPLATE.format(mode=mode))
        summary = read_summary(summary_path) if summary_path.exists() else None
        policy_enabled = mode == RunMode.MINOS.value and experiment.policy.enabled
        problems = verify_trace(
            read_trace(trace_path),
            experiment.policy.retry_cap,
            policy_enabled,
            summary=summary,
            cost=experiment.cost,
        )
        if problems:
            failures += 1
            logger.error(f"{trace_path}: {len(problems)} problems")
            for problem in problems[:20]:
                logger.error(f"  {problem}")
        else:
            logger.info(f"{trace_path}: ok")
    return EXIT_INVARIANT if failures else EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    configure_logging(args.log_level or os.environ.get(config.ENV_LOG_LEVEL, "INFO"))

    try:
        if args.command == "print-default-config":
            if extra:
                raise ConfigError([f"unexpected arguments {extra}"])
            raw = load_config(args.config).model_dump(mode="json") if args.config else default_config_dict()
            print(json.dumps(raw, indent=2))
            return EXIT_OK
        if args.command == "verify":
            return verify_outputs(args.path, args.config)

        experiment = resolve_config(args, parse_overrides(extra))
        if args.command == "pretest":
            return run_pretest_only(experiment)
        return run_experiment(experiment)
    except ConfigError as e:
        for message in e.errors:
            logger.error(f"Config error: {message}")
        return EXIT_CONFIG
    except OSError as e:
        logger.error(f"Cannot read input: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
