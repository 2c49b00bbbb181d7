import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from estimators import (
    P2State,
    WelfordState,
    nearest_rank,
    p2_estimate,
    p2_update,
    welford_mean,
    welford_update,
    welford_variance,
)


def _feed_welford(values):
    state = WelfordState()
    for x in values:
        state = welford_update(state, x)
    return state


def _feed_p2(values, q):
    state = P2State(q=q)
    for x in values:
        state = p2_update(state, x)
    return state


@pytest.mark.parametrize(
    "q, expected",
    [(0.1, 1), (0.4, 4), (0.5, 5), (0.6, 6), (1.0, 10)],
)
def test_nearest_rank_on_one_to_ten(q, expected):
    assert nearest_rank(list(range(10, 0, -1)), q) == expected


def test_nearest_rank_guards_float_rounding():
    # 0.6 * 5 is 3.0000000000000004
    assert nearest_rank([1, 2, 3, 4, 5], 0.6) == 3


@given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=1, max_size=60), st.floats(0.01, 1.0))
def test_nearest_rank_matches_full_sort(values, q):
    ordered = sorted(values)
    value = nearest_rank(values, q)
    at_or_below = sum(1 for v in ordered if v <= value)
    assert at_or_below >= q * len(values) - 1e-9
    assert value in values


def test_nearest_rank_rejects_bad_input():
    with pytest.raises(ValueError):
        nearest_rank([], 0.5)
    with pytest.raises(ValueError):
        nearest_rank([1.0], 0.0)


def test_welford_matches_two_pass_statistics():
    values = np.random.default_rng(1).normal(300.0, 25.0, size=2_000)
    state = _feed_welford(values)
    assert state.count == 2_000
    assert welford_mean(state) == pytest.approx(np.mean(values), rel=1e-10)
    assert welford_variance(state) == pytest.approx(np.var(values, ddof=1), rel=1e-9)


def test_welford_undefined_cases():
    with pytest.raises(ValueError):
        welford_mean(WelfordState())
    with pytest.raises(ValueError):
        welford_variance(welford_update(WelfordState(), 1.0))


def test_p2_needs_five_observations():
    state = _feed_p2([3.0, 1.0, 2.0, 5.0], q=0.5)
    with pytest.raises(ValueError):
        p2_estimate(state)
    state = p2_update(state, 4.0)
    assert p2_estimate(state) == 3.0
    assert state.heights == (1.0, 2.0, 3.0, 4.0, 5.0)


@pytest.mark.parametrize("q", [0.0, 1.0])
def test_p2_quantile_must_be_interior(q):
    with pytest.raises(ValueError):
        P2State(q=q)


def test_p2_tracks_uniform_quantile():
    values = np.random.default_rng(5).uniform(100.0, 200.0, size=5_000)
    state = _feed_p2(values, q=0.4)
    assert p2_estimate(state) == pytest.approx(140.0, rel=0.02)
    assert min(values) == state.heights[0]
    assert max(values) == state.heights[4]


def test_p2_state_is_immutable():
    before = _feed_p2([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], q=0.5)
    after = p2_update(before, 100.0)
    assert before.count == 6
    assert after.count == 7
