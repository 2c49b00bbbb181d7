import dataclasses
import math

import numpy as np
import pandas as pd
import pytest

import config
from cost import AttemptClass, cost_per_million_series, total_cost
from policy import ElysiumThreshold
from reporting import (
    RunTrace,
    cheaper_metrics,
    compare,
    compare_pooled,
    comparison_frame,
    read_summary,
    read_trace,
    records_from_frame,
    summarize,
    time_series_frame,
    verify_trace,
    write_summary,
    write_trace,
)
from workload import RunMode, run_simulation


@pytest.fixture
def minos_pair(make_config):
    experiment = make_config(workload__vu_count=10)
    threshold = ElysiumThreshold(290.0, 0.4)
    minos = run_simulation(experiment, 21, RunMode.MINOS, threshold=threshold)
    baseline = run_simulation(experiment, 21, RunMode.BASELINE)
    return experiment, RunTrace.from_result(baseline, experiment), RunTrace.from_result(minos, experiment)


def test_constant_service_summary(closed_form_config):
    result = run_simulation(closed_form_config, 1, RunMode.BASELINE)
    summary = summarize(RunTrace.from_result(result, closed_form_config))

    assert summary.successful_requests == 600
    assert summary.mean_end_to_end_ms == 2400
    assert summary.median_end_to_end_ms == 2400
    assert summary.mean_compute_ms == 2000
    assert summary.termination_count == 0
    assert summary.retry_histogram == {0: 600}
    assert summary.cost_per_million == pytest.approx((2400 * 20 + 1000) * 1e6 / 1e9)


def test_summary_matches_the_trace(minos_pair):
    experiment, _, trace = minos_pair
    summary = summarize(trace)

    completed = [r for r in trace.records if r.successful]
    assert summary.successful_requests == len(completed)
    assert summary.cost == total_cost(trace.records, experiment.cost)
    assert summary.termination_count > 0
    assert sum(k * n for k, n in summary.retry_histogram.items()) == summary.termination_count

    compute = sorted(r.compute_ms for r in completed)
    assert summary.median_compute_ms == compute[math.ceil(0.5 * len(compute)) - 1]
    assert summary.mean_compute_ms == pytest.approx(np.mean(compute))
    assert summary.series_t_ms[-1] == experiment.workload.duration_ms
    assert summary.series_cost_nano[-1] == summary.cost.total_cost_nano


def test_summaries_are_pure(minos_pair):
    _, _, trace = minos_pair
    assert summarize(trace).model_dump_json() == summarize(trace).model_dump_json()


def test_empty_trace_is_rejected(minos_pair):
    _, baseline, _ = minos_pair
    empty = dataclasses.replace(baseline, records=(), submitted=0)
    with pytest.raises(ValueError):
        summarize(empty)


def test_identical_summaries_compare_as_equal(minos_pair):
    _, baseline, _ = minos_pair
    summary = summarize(baseline)
    report = compare(summary, summary)

    assert report.compute_speedup_pct == 0.0
    assert report.success_delta_pct == 0.0
    assert report.cost_delta_pct == 0.0
    assert report.fraction_of_time_cheaper == 0.5
    assert report.crossover_time_ms is None


def test_mismatched_runs_are_rejected(minos_pair):
    _, baseline, minos = minos_pair
    b = summarize(baseline)
    with pytest.raises(ValueError, match="seeds"):
        compare(b, summarize(minos).model_copy(update={"seed": 99}))
    with pytest.raises(ValueError, match="settings"):
        compare(b, summarize(minos).model_copy(update={"fingerprint": "0" * 16}))


def test_speedup_is_relative_to_baseline_mean(minos_pair):
    _, baseline, minos = minos_pair
    b, m = summarize(baseline), summarize(minos)
    report = compare(b, m)

    expected = (b.mean_compute_ms - m.mean_compute_ms) / b.mean_compute_ms * 100
    assert report.compute_speedup_pct == pytest.approx(expected)
    assert report.minos_terminations == m.termination_count
    assert report.baseline_cost_per_million == pytest.approx(b.cost_per_million)


def test_pooling_a_single_pair_matches_compare(minos_pair):
    _, baseline, minos = minos_pair
    b, m = summarize(baseline), summarize(minos)
    single, pooled = compare(b, m), compare_pooled([(b, m)])

    assert pooled.seed is None
    assert pooled.model_dump(exclude={"seed", "compute_speedup_pct"}) == single.model_dump(
        exclude={"seed", "compute_speedup_pct"}
    )
    assert pooled.compute_speedup_pct == pytest.approx(single.compute_speedup_pct)


@pytest.mark.parametrize(
    "baseline, minos, crossover, fraction",
    [
        ([math.inf, 10, 10, 10, 10], [math.inf, 12, 9, 11, 9], 5, 0.5),
        ([math.inf, 10, 10, 10, 10], [math.inf, 12, 9, 9, 9], 3, 0.75),
        ([math.inf, 10, 10], [math.inf, math.inf, 12], None, 0.0),
        ([math.inf, math.inf], [math.inf, math.inf], None, 0.5),
        ([10, 10, 10], [11, 11, 11], None, 0.0),
        ([10, 10, 10], [9, 9, 9], 1, 1.0),
    ],
)
def test_cheaper_metrics(baseline, minos, crossover, fraction):
    t = list(range(1, len(baseline) + 1))
    assert cheaper_metrics(t, np.array(baseline), np.array(minos)) == (crossover, pytest.approx(fraction))


def test_fraction_cheaper_matches_recount(minos_pair):
    _, baseline, minos = minos_pair
    b, m = summarize(baseline), summarize(minos)
    report = compare(b, m)

    bs = cost_per_million_series(b.series_cost_nano, b.series_successes)
    ms = cost_per_million_series(m.series_cost_nano, m.series_successes)
    score, counted = 0.0, 0
    for x, y in zip(bs, ms):
        if math.isinf(x) and math.isinf(y):
            continue
        counted += 1
        score += 1.0 if y < x else 0.5 if y == x else 0.0
    assert report.fraction_of_time_cheaper == pytest.approx(score / counted)


def test_written_trace_verifies_and_tampering_is_caught(minos_pair, tmp_path):
    experiment, _, trace = minos_pair
    summary = summarize(trace)
    path = write_trace(trace.records, tmp_path / "minos_trace.csv")
    write_summary(summary, tmp_path / "minos_summary.json")

    frame = read_trace(path)
    assert list(frame.columns) == config.TRACE_COLUMNS
    restored = records_from_frame(frame)
    assert [(r.invocation_id, r.attempt_index, r.ended_at) for r in restored] == [
        (r.invocation_id, r.attempt_index, r.ended_at) for r in trace.records
    ]
    assert read_summary(tmp_path / "minos_summary.json") == summary
    assert verify_trace(frame, experiment.policy.retry_cap, True, summary=summary, cost=experiment.cost) == []

    tampered = frame.copy()
    tampered.loc[0, "billed_ms"] += 1
    problems = verify_trace(tampered, experiment.policy.retry_cap, True, summary=summary, cost=experiment.cost)
    assert any("billed_ms" in p for p in problems)

    terminated = frame.index[frame["classification"] == AttemptClass.TERMINATED.value]
    assert len(terminated)
    assert verify_trace(frame, experiment.policy.retry_cap, False)


def test_time_series_and_comparison_frames(minos_pair):
    _, baseline, minos = minos_pair
    b, m = summarize(baseline), summarize(minos)

    series = time_series_frame(b, m)
    assert list(series.columns) == config.TIME_SERIES_COLUMNS
    assert series["t_sec"].iloc[-1] == 60.0
    assert len(series) == 60

    table = comparison_frame([compare(b, m), compare_pooled([(b, m)])])
    assert list(table.columns) == config.COMPARISON_COLUMNS
    assert table["seed"].tolist() == [21, "pooled"]
    assert isinstance(table, pd.DataFrame)
