"""
Reporting
Turns finished runs into traces, summaries and baseline-vs-minos comparisons,
and reads/writes the CSV and JSON outputs. Everything here is computed from
the per-attempt trace after the run; nothing reaches back into the engine.
"""

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

import config
from cost import (
    AttemptClass,
    AttemptRecord,
    CostParams,
    CostReport,
    attempt_cost_nano,
    billed_ms,
    combine_reports,
    cost_per_million_series,
    cost_per_million_successful,
    cost_series,
    total_cost,
)
from estimators import nearest_rank, welford_mean, welford_variance
from experiment_config import ExperimentConfig
from workload import SimulationResult


@dataclass(frozen=True)
class RunTrace:
    """Immutable trace of one run plus the run-level facts a summary needs."""

    mode: str
    seed: int
    fingerprint: str
    duration_ms: int
    cost: CostParams
    sample_interval_ms: int
    records: Tuple[AttemptRecord, ...]
    submitted: int
    cold_starts: int = 0
    exemptions: int = 0
    threshold_ms: Optional[float] = None
    threshold_history: Tuple[Tuple[int, float], ...] = ()
    score_count: int = 0
    score_mean: Optional[float] = None
    score_std: Optional[float] = None

    @classmethod
    def from_result(cls, result: SimulationResult, experiment: ExperimentConfig) -> "RunTrace":
        stats = result.score_stats
        threshold = result.threshold
        return cls(
            mode=result.mode.value,
            seed=result.seed,
            fingerprint=experiment.fingerprint(),
            duration_ms=result.duration_ms,
            cost=experiment.cost,
            sample_interval_ms=experiment.reporting.sample_interval_ms,
            records=tuple(result.attempts),
            submitted=result.submitted,
            cold_starts=result.cold_starts,
            exemptions=result.exemptions,
            threshold_ms=threshold.value if threshold is not None and math.isfinite(threshold.value) else None,
            threshold_history=tuple(result.threshold_history),
            score_count=stats.count,
            score_mean=welford_mean(stats) if stats.count else None,
            score_std=math.sqrt(welford_variance(stats)) if stats.count >= 2 else None,
        )


class RunSummary(BaseModel):
    mode: str
    seed: int
    fingerprint: str
    duration_ms: int
    submitted: int
    successful_requests: int
    incomplete: int
    mean_compute_ms: Optional[float] = None
    median_compute_ms: Optional[float] = None
    total_compute_ms: int = 0
    mean_end_to_end_ms: Optional[float] = None
    median_end_to_end_ms: Optional[float] = None
    mean_prepare_ms: Optional[float] = None
    cold_starts: int = 0
    termination_count: int = 0
    exempt_count: int = 0
    retry_histogram: Dict[int, int] = Field(default_factory=dict)
    cost: CostReport
    cost_per_million: Optional[float] = Field(None, description="Undefined without successes")
    settled_cost_per_million: Optional[float] = Field(
        None, description="Cost of completed invocations only, per million of them"
    )
    threshold_ms: Optional[float] = None
    threshold_history: List[Tuple[int, float]] = Field(default_factory=list)
    score_count: int = 0
    score_mean: Optional[float] = None
    score_std: Optional[float] = None
    series_t_ms: List[int] = Field(default_factory=list)
    series_cost_nano: List[int] = Field(default_factory=list)
    series_successes: List[int] = Field(default_factory=list)


class ComparisonReport(BaseModel):
    seed: Optional[int] = Field(None, description="None for a pooled report")
    compute_speedup_pct: Optional[float] = None
    success_delta_pct: float = 0.0
    cost_delta_pct: Optional[float] = None
    crossover_time_ms: Optional[int] = None
    fraction_of_time_cheaper: float = 0.5
    baseline_successes: int = 0
    minos_successes: int = 0
    baseline_cost_per_million: Optional[float] = None
    minos_cost_per_million: Optional[float] = None
    minos_terminations: int = 0


# --- summaries ---


def _mean(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


def _median(values: Sequence[float]) -> Optional[float]:
    return float(nearest_rank(values, 0.5)) if len(values) else None


def summarize(trace: RunTrace) -> RunSummary:
    """Aggregate statistics of one run; a pure function of the trace."""
    if trace.submitted == 0 and not trace.records:
        raise ValueError("cannot summarize an empty trace")

    completed = [r for r in trace.records if r.successful]
    compute = [r.compute_ms for r in completed]
    end_to_end = [r.completed_at - r.submitted_at for r in completed]
    prepare = [r.prepare_ms for r in trace.records if not r.truncated]

    # each non-truncated terminated attempt re-queued its invocation once
    retries: Counter = Counter()
    invocations = set()
    for r in trace.records:
        invocations.add(r.invocation_id)
        if r.classification is AttemptClass.TERMINATED and not r.truncated:
            retries[r.invocation_id] += 1
    histogram = Counter(retries[i] for i in invocations)

    report = total_cost(trace.records, trace.cost)
    done_ids = {r.invocation_id for r in completed}
    settled = total_cost([r for r in trace.records if r.invocation_id in done_ids], trace.cost)

    series = cost_series(trace.records, trace.cost, trace.duration_ms, trace.sample_interval_ms)
    successes = len(completed)
    return RunSummary(
        mode=trace.mode,
        seed=trace.seed,
        fingerprint=trace.fingerprint,
        duration_ms=trace.duration_ms,
        submitted=trace.submitted,
        successful_requests=successes,
        incomplete=trace.submitted - successes,
        mean_compute_ms=_mean(compute),
        median_compute_ms=_median(compute),
        total_compute_ms=int(sum(compute)),
        mean_end_to_end_ms=_mean(end_to_end),
        median_end_to_end_ms=_median(end_to_end),
        mean_prepare_ms=_mean(prepare),
        cold_starts=trace.cold_starts,
        termination_count=sum(retries.values()),
        exempt_count=trace.exemptions,
        retry_histogram=dict(sorted(histogram.items())),
        cost=report,
        cost_per_million=cost_per_million_successful(report) if successes else None,
        settled_cost_per_million=cost_per_million_successful(settled) if successes else None,
        threshold_ms=trace.threshold_ms,
        threshold_history=list(trace.threshold_history),
        score_count=trace.score_count,
        score_mean=trace.score_mean,
        score_std=trace.score_std,
        series_t_ms=series.t_ms,
        series_cost_nano=series.cumulative_cost_nano,
        series_successes=series.cumulative_successes,
    )


# --- comparisons ---


@dataclass(frozen=True)
class _Arm:
    """The parts of one or more summaries a comparison needs."""

    total_compute_ms: int
    cost: CostReport
    terminations: int
    t_ms: List[int]
    cumulative_cost: np.ndarray
    cumulative_successes: np.ndarray

    @classmethod
    def pool(cls, summaries: Sequence[RunSummary]) -> "_Arm":
        grids = {tuple(s.series_t_ms) for s in summaries}
        if len(grids) != 1:
            raise ValueError("summaries were sampled on different time grids")
        return cls(
            total_compute_ms=sum(s.total_compute_ms for s in summaries),
            cost=combine_reports([s.cost for s in summaries]),
            terminations=sum(s.termination_count for s in summaries),
            t_ms=list(summaries[0].series_t_ms),
            cumulative_cost=np.sum([np.asarray(s.series_cost_nano, dtype=float) for s in summaries], axis=0),
            cumulative_successes=np.sum([np.asarray(s.series_successes, dtype=float) for s in summaries], axis=0),
        )

    @property
    def successes(self) -> int:
        return self.cost.successful

    @property
    def mean_compute_ms(self) -> Optional[float]:
        return self.total_compute_ms / self.successes if self.successes else None

    @property
    def cost_per_million(self) -> Optional[float]:
        return cost_per_million_successful(self.cost) if self.successes else None

    def series(self) -> np.ndarray:
        return cost_per_million_series(self.cumulative_cost, self.cumulative_successes)


def cheaper_metrics(
    t_ms: Sequence[int], baseline: np.ndarray, minos: np.ndarray
) -> Tuple[Optional[int], float]:
    """
    (crossover_time_ms, fraction_of_time_cheaper) for two cost-per-success series.
    Each sample scores 1 when minos is strictly cheaper, 0.5 on a tie and 0
    otherwise; samples before either arm has a success are left out. The
    crossover is the first sample from which minos stays strictly cheaper
    until the end.
    """
    baseline = np.asarray(baseline, dtype=float)
    minos = np.asarray(minos, dtype=float)
    if len(baseline) == 0:
        return None, 0.5
    cheaper = minos < baseline
    scored = np.isfinite(baseline) | np.isfinite(minos)
    scores = np.where(cheaper, 1.0, np.where(minos == baseline, 0.5, 0.0))[scored]
    fraction = float(np.mean(scores)) if len(scores) else 0.5

    crossover = None
    if cheaper[-1]:
        not_cheaper = np.flatnonzero(~cheaper)
        first = int(not_cheaper[-1]) + 1 if len(not_cheaper) else 0
        crossover = int(t_ms[first])
    return crossover, fraction


def _pct_delta(new: Optional[float], old: Optional[float]) -> Optional[float]:
    if new is None or old is None or old == 0:
        return None
    return (new - old) / old * 100.0


def _compare_arms(seed: Optional[int], baseline: _Arm, minos: _Arm) -> ComparisonReport:
    speedup = None
    if baseline.mean_compute_ms and minos.mean_compute_ms is not None:
        speedup = (baseline.mean_compute_ms - minos.mean_compute_ms) / baseline.mean_compute_ms * 100.0

    if baseline.successes:
        success_delta = (minos.successes - baseline.successes) / baseline.successes * 100.0
    else:
        success_delta = 0.0 if minos.successes == 0 else math.inf

    crossover, fraction = cheaper_metrics(baseline.t_ms, baseline.series(), minos.series())
    return ComparisonReport(
        seed=seed,
        compute_speedup_pct=speedup,
        success_delta_pct=success_delta,
        cost_delta_pct=_pct_delta(minos.cost_per_million, baseline.cost_per_million),
        crossover_time_ms=crossover,
        fraction_of_time_cheaper=fraction,
        baseline_successes=baseline.successes,
        minos_successes=minos.successes,
        baseline_cost_per_million=baseline.cost_per_million,
        minos_cost_per_million=minos.cost_per_million,
        minos_terminations=minos.terminations,
    )


def _check_pair(baseline: RunSummary, minos: RunSummary):
    if baseline.seed != minos.seed:
        raise ValueError(f"cannot compare runs with different seeds ({baseline.seed} vs {minos.seed})")
    if baseline.fingerprint != minos.fingerprint:
        raise ValueError("cannot compare runs with different platform, workload, function or cost settings")
    if baseline.duration_ms != minos.duration_ms:
        raise ValueError("cannot compare runs of different durations")


def compare(baseline: RunSummary, minos: RunSummary) -> ComparisonReport:
    _check_pair(baseline, minos)
    return _compare_arms(baseline.seed, _Arm.pool([baseline]), _Arm.pool([minos]))


def compare_pooled(pairs: Sequence[Tuple[RunSummary, RunSummary]]) -> ComparisonReport:
    """One report over several seeds: sums are pooled before any ratio is taken."""
    if not pairs:
        raise ValueError("nothing to pool")
    for baseline, minos in pairs:
        _check_pair(baseline, minos)
    return _compare_arms(None, _Arm.pool([b for b, _ in pairs]), _Arm.pool([m for _, m in pairs]))


def time_series_frame(baseline: RunSummary, minos: RunSummary) -> pd.DataFrame:
    return _series_frame(_Arm.pool([baseline]), _Arm.pool([minos]))


def pooled_time_series_frame(pairs: Sequence[Tuple[RunSummary, RunSummary]]) -> pd.DataFrame:
    return _series_frame(_Arm.pool([b for b, _ in pairs]), _Arm.pool([m for _, m in pairs]))


def _series_frame(baseline: _Arm, minos: _Arm) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "t_sec": np.asarray(baseline.t_ms, dtype=float) / 1000.0,
            "baseline_cost_per_success": baseline.series(),
            "minos_cost_per_success": minos.series(),
        },
        columns=config.TIME_SERIES_COLUMNS,
    )


def comparison_frame(reports: Iterable[ComparisonReport]) -> pd.DataFrame:
    rows = []
    for report in reports:
        row = report.model_dump()
        row["seed"] = "pooled" if report.seed is None else report.seed
        rows.append(row)
    return pd.DataFrame(rows, columns=config.COMPARISON_COLUMNS)


# --- trace files ---


def trace_frame(records: Sequence[AttemptRecord]) -> pd.DataFrame:
    rows = []
    for r in records:
        rows.append(
            {
                "invocation_id": r.invocation_id,
                "vu_id": r.vu_id,
                "attempt_index": r.attempt_index,
                "classification": r.classification.value,
                "node_id": r.node_id,
                "perf_factor": r.perf_factor,
                "prepare_ms": r.prepare_ms,
                "benchmark_ms": r.benchmark_ms,
                "benchmark_score": r.benchmark_score,
                "compute_ms": r.compute_ms,
                "billed_ms": billed_ms(r),
                "submitted_at": r.submitted_at,
                "completed_at": r.completed_at,
                "instance_id": r.instance_id,
                "judged": r.judged,
                "retry_count": r.retry_count,
                "started_at": r.started_at,
                "ended_at": r.ended_at,
                "truncated": r.truncated,
            }
        )
    frame = pd.DataFrame(rows, columns=config.TRACE_COLUMNS)
    frame["completed_at"] = frame["completed_at"].astype("Int64")
    return frame


def write_trace(records: Sequence[AttemptRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trace_frame(records).to_csv(path, index=False, float_format="%.9g")
    return path


def read_trace(path: Union[str, Path]) -> pd.DataFrame:
    frame = pd.read_csv(path)
    missing = [c for c in config.TRACE_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"{path}: trace is missing columns {missing}")
    frame["completed_at"] = frame["completed_at"].astype("Int64")
    return frame


def records_from_frame(frame: pd.DataFrame) -> List[AttemptRecord]:
    records = []
    for row in frame.itertuples(index=False):
        records.append(
            AttemptRecord(
                invocation_id=int(row.invocation_id),
                vu_id=int(row.vu_id),
                attempt_index=int(row.attempt_index),
                classification=AttemptClass(row.classification),
                instance_id=int(row.instance_id),
                node_id=int(row.node_id),
                perf_factor=float(row.perf_factor),
                judged=str(row.judged),
                retry_count=int(row.retry_count),
                prepare_ms=int(row.prepare_ms),
                benchmark_ms=int(row.benchmark_ms),
                benchmark_score=None if pd.isna(row.benchmark_score) else float(row.benchmark_score),
                compute_ms=int(row.compute_ms),
                submitted_at=int(row.submitted_at),
                started_at=int(row.started_at),
                ended_at=int(row.ended_at),
                completed_at=None if pd.isna(row.completed_at) else int(row.completed_at),
                truncated=bool(row.truncated),
            )
        )
    return records


def write_summary(summary: RunSummary, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(summary.model_dump_json(indent=2), encoding="utf-8")
    return path


def read_summary(path: Union[str, Path]) -> RunSummary:
    return RunSummary.model_validate_json(Path(path).read_text(encoding="utf-8"))


def write_frame(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.9g")
    return path


def write_excel(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_excel(path, index=False)
    return path


# --- verification ---


def verify_trace(
    frame: pd.DataFrame,
    retry_cap: int,
    policy_enabled: bool,
    summary: Optional[RunSummary] = None,
    cost: Optional[CostParams] = None,
) -> List[str]:
    """
    Re-check a written trace without the simulator. Returns one message per
    problem found; an empty list means the trace is consistent.
    """
    problems: List[str] = []
    records = records_from_frame(frame)
    if not records:
        return ["trace has no attempts"]
    # instances benchmarked during a warm-up were observed, not judged
    observed = {
        r.instance_id
        for r in records
        if r.classification is not AttemptClass.WARM_REUSE and r.benchmark_score is not None and r.judged == "unjudged"
    }

    for r, written in zip(records, frame["billed_ms"]):
        expected = billed_ms(r)
        if int(written) != expected:
            problems.append(f"attempt {r.invocation_id}/{r.attempt_index}: billed_ms {written} != {expected}")
        if r.retry_count > retry_cap:
            problems.append(f"attempt {r.invocation_id}/{r.attempt_index}: retry_count {r.retry_count} > cap")
        if r.classification is AttemptClass.TERMINATED:
            if r.compute_ms or r.successful:
                problems.append(f"attempt {r.invocation_id}/{r.attempt_index}: terminated but computed")
            if not policy_enabled:
                problems.append(f"attempt {r.invocation_id}/{r.attempt_index}: terminated with the policy off")
            elif r.retry_count >= retry_cap:
                problems.append(f"attempt {r.invocation_id}/{r.attempt_index}: terminated past the retry cap")
        if not policy_enabled and r.benchmark_ms:
            problems.append(f"attempt {r.invocation_id}/{r.attempt_index}: benchmark ran with the policy off")
        if r.classification is AttemptClass.WARM_REUSE:
            if r.benchmark_ms:
                problems.append(f"attempt {r.invocation_id}/{r.attempt_index}: warm attempt ran a benchmark")
            if policy_enabled and r.judged not in ("passed", "exempt") and r.instance_id not in observed:
                problems.append(f"instance {r.instance_id}: reused while {r.judged}")
        if r.ended_at < r.started_at:
            problems.append(f"attempt {r.invocation_id}/{r.attempt_index}: ends before it starts")

    # instance history: one cold start, then warm reuses that never overlap
    by_instance: Dict[int, List[AttemptRecord]] = defaultdict(list)
    for r in records:
        by_instance[r.instance_id].append(r)
    for instance_id, history in by_instance.items():
        history.sort(key=lambda r: r.started_at)
        if history[0].classification is AttemptClass.WARM_REUSE:
            problems.append(f"instance {instance_id}: first attempt is a warm reuse")
        for previous, current in zip(history, history[1:]):
            if current.classification is not AttemptClass.WARM_REUSE:
                problems.append(f"instance {instance_id}: cold attempt after the instance was used")
            if previous.classification is AttemptClass.TERMINATED:
                problems.append(f"instance {instance_id}: reused after terminating")
            if current.started_at < previous.ended_at:
                problems.append(f"instance {instance_id}: overlapping attempts")

    # invocations: attempts in order, at most one completion, and it is the last
    by_invocation: Dict[int, List[AttemptRecord]] = defaultdict(list)
    for r in records:
        by_invocation[r.invocation_id].append(r)
    for invocation_id, attempts in by_invocation.items():
        attempts.sort(key=lambda r: r.attempt_index)
        if [a.attempt_index for a in attempts] != list(range(len(attempts))):
            problems.append(f"invocation {invocation_id}: attempt indices are not 0..n-1")
        completions = [a for a in attempts if a.successful]
        if len(completions) > 1 or (completions and completions[0] is not attempts[-1]):
            problems.append(f"invocation {invocation_id}: completion is not its final attempt")
        for previous, current in zip(attempts, attempts[1:]):
            if current.started_at < previous.ended_at:
                problems.append(f"invocation {invocation_id}: attempts overlap")

    # per-VU sequentiality
    by_vu: Dict[int, Dict[int, AttemptRecord]] = defaultdict(dict)
    for invocation_id, attempts in by_invocation.items():
        by_vu[attempts[0].vu_id][invocation_id] = attempts[-1]
    for vu_id, last_attempts in by_vu.items():
        ordered = sorted(last_attempts.values(), key=lambda r: r.submitted_at)
        for previous, current in zip(ordered, ordered[1:]):
            if previous.completed_at is None or current.submitted_at < previous.completed_at:
                problems.append(f"VU {vu_id}: invocation {current.invocation_id} submitted while another was in flight")

    if summary is not None:
        if cost is not None:
            recomputed = sum(attempt_cost_nano(r, cost) for r in records)
            if recomputed != summary.cost.total_cost_nano:
                problems.append(f"total cost {recomputed} != summary {summary.cost.total_cost_nano}")
        successes = sum(1 for r in records if r.successful)
        if successes != summary.successful_requests:
            problems.append(f"{successes} completions in the trace, summary says {summary.successful_requests}")
        terminations = sum(1 for r in records if r.classification is AttemptClass.TERMINATED and not r.truncated)
        if terminations != summary.termination_count:
            problems.append(f"{terminations} terminations in the trace, summary says {summary.termination_count}")
    return problems


def write_pretest_scores(samples, path: Union[str, Path]) -> Path:
    frame = pd.DataFrame(
        [{"instance_id": s.instance_id, "score": s.score, "measured_at": s.measured_at} for s in samples],
        columns=config.PRETEST_COLUMNS,
    )
    return write_frame(frame, path)
