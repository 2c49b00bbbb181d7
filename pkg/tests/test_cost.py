import math

import numpy as np
import pytest
from pydantic import ValidationError

from cost import (
    AttemptClass,
    AttemptRecord,
    CostParams,
    attempt_cost_nano,
    billed_ms,
    combine_reports,
    cost_per_million_series,
    cost_per_million_successful,
    cost_series,
    total_cost,
)


def _attempt(classification, prepare=400, benchmark=0, compute=0, ended_at=1000, completed_at=None, **kwargs):
    return AttemptRecord(
        invocation_id=kwargs.get("invocation_id", 0),
        vu_id=0,
        attempt_index=kwargs.get("attempt_index", 0),
        classification=classification,
        instance_id=0,
        node_id=0,
        perf_factor=1.0,
        judged="unjudged",
        retry_count=0,
        prepare_ms=prepare,
        benchmark_ms=benchmark,
        benchmark_score=float(benchmark) if benchmark else None,
        compute_ms=compute,
        submitted_at=0,
        started_at=0,
        ended_at=ended_at,
        completed_at=completed_at,
    )


@pytest.fixture
def params():
    return CostParams(c_exec_nano=20, c_inv_nano=1000)


@pytest.fixture
def mixed_attempts():
    return [
        _attempt(AttemptClass.TERMINATED, prepare=400, benchmark=300, ended_at=400),
        _attempt(AttemptClass.PASSED_COLD_START, prepare=400, benchmark=500, compute=2000, ended_at=2900, completed_at=2900),
        _attempt(AttemptClass.WARM_REUSE, prepare=400, compute=1600, ended_at=5000, completed_at=5000),
    ]


@pytest.mark.parametrize(
    "classification, prepare, benchmark, compute, expected",
    [
        (AttemptClass.TERMINATED, 400, 300, 0, 400),
        (AttemptClass.TERMINATED, 400, 450, 0, 450),
        (AttemptClass.PASSED_COLD_START, 400, 300, 2000, 2400),
        (AttemptClass.PASSED_COLD_START, 400, 500, 2000, 2500),
        (AttemptClass.WARM_REUSE, 400, 0, 1600, 2000),
    ],
)
def test_billed_duration_per_class(classification, prepare, benchmark, compute, expected):
    attempt = _attempt(classification, prepare=prepare, benchmark=benchmark, compute=compute)
    assert billed_ms(attempt) == expected


def test_in_flight_attempt_cannot_be_billed():
    with pytest.raises(ValueError):
        billed_ms(_attempt(AttemptClass.WARM_REUSE, ended_at=None))


def test_total_cost_follows_the_cost_equation(params, mixed_attempts):
    report = total_cost(mixed_attempts, params)

    assert (report.n_term, report.n_pass, report.n_reuse) == (1, 1, 1)
    assert (report.d_term_ms, report.d_pass_ms, report.d_reuse_ms) == (400, 2500, 2000)
    assert report.total_cost_nano == 20 * (400 + 2500 + 2000) + 1000 * 3
    assert report.total_cost_nano == sum(attempt_cost_nano(a, params) for a in mixed_attempts)
    assert report.successful == 2


def test_cost_per_million_keeps_terminated_attempts_in_numerator(params, mixed_attempts):
    report = total_cost(mixed_attempts, params)
    assert cost_per_million_successful(report) == pytest.approx(101_000 / 2 * 1e6 / 1e9)


def test_cost_per_million_needs_a_success(params):
    report = total_cost([_attempt(AttemptClass.TERMINATED)], params)
    with pytest.raises(ValueError):
        cost_per_million_successful(report)


def test_combined_reports_are_priced_on_pooled_sums(params, mixed_attempts):
    first = total_cost(mixed_attempts[:2], params)
    second = total_cost(mixed_attempts[2:], params)
    combined = combine_reports([first, second])

    assert combined == total_cost(mixed_attempts, params)
    assert cost_per_million_successful(combined) == pytest.approx(101_000 / 2 * 1e6 / 1e9)

    with pytest.raises(ValueError, match="different prices"):
        combine_reports([first, total_cost(mixed_attempts, CostParams.from_tier("large"))])


def test_invocation_fee_is_worth_fifty_milliseconds_on_the_small_tier():
    assert CostParams.from_tier("small").invocation_equivalent_ms == 50
    assert CostParams.from_tier("large").invocation_equivalent_ms < 3.5


def test_unknown_tier_lists_supported_tiers():
    with pytest.raises(ValidationError, match="supported: large, small"):
        CostParams.model_validate({"tier": "medium"})


def test_cost_series_charges_at_end_and_counts_successes_at_completion(params, mixed_attempts):
    series = cost_series(mixed_attempts, params, duration_ms=5000, interval_ms=1000)
    term, passed, reuse = (attempt_cost_nano(a, params) for a in mixed_attempts)

    assert series.t_ms == [1000, 2000, 3000, 4000, 5000]
    assert series.cumulative_cost_nano == [term, term, term + passed, term + passed, term + passed + reuse]
    assert series.cumulative_successes == [0, 0, 1, 1, 2]

    per_million = cost_per_million_series(series.cumulative_cost_nano, series.cumulative_successes)
    assert np.isinf(per_million[0]) and np.isinf(per_million[1])
    assert per_million[-1] == pytest.approx((term + passed + reuse) / 2 * 1e6 / 1e9)
    assert not math.isinf(per_million[2])


def test_cost_series_without_attempts(params):
    series = cost_series([], params, duration_ms=3000, interval_ms=1000)
    assert series.cumulative_cost_nano == [0, 0, 0]
    assert series.cumulative_successes == [0, 0, 0]
