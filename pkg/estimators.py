"""
Online statistics used to recalculate the elysium threshold while a run
is in progress.

WelfordState tracks running mean and variance; P2State tracks one quantile
with five markers and piecewise-parabolic adjustment (Jain & Chlamtac, 1985).
Both are immutable: every update returns a new state, so a snapshot can be
kept for reporting without copying.
"""

import math
from dataclasses import dataclass, replace
from typing import Sequence, Tuple

from sim_core import InvariantViolation

# Rank rounding guard, so that q * n landing a hair above an integer
# (0.6 * 5 == 3.0000000000000004) does not move to the next rank.
_RANK_EPS = 1e-9


def nearest_rank(values: Sequence[float], q: float) -> float:
    """
    Nearest-rank quantile: the smallest sample such that at least a
    fraction q of the samples are <= it.
    """
    if not values:
        raise ValueError("nearest_rank needs at least one value")
    if not 0.0 < q <= 1.0:
        raise ValueError(f"quantile must be in (0, 1], got {q}")
    ordered = sorted(values)
    rank = max(1, math.ceil(q * len(ordered) - _RANK_EPS))
    return ordered[rank - 1]


# --- Welford ---


@dataclass(frozen=True)
class WelfordState:
    count: int = 0
    mean: float = 0.0
    m2: float = 0.0


def welford_update(state: WelfordState, x: float) -> WelfordState:
    count = state.count + 1
    delta = x - state.mean
    mean = state.mean + delta / count
    m2 = state.m2 + delta * (x - mean)
    return WelfordState(count, mean, m2)


def welford_mean(state: WelfordState) -> float:
    if state.count == 0:
        raise ValueError("mean is undefined before the first observation")
    return state.mean


def welford_variance(state: WelfordState) -> float:
    """Sample variance (n - 1 denominator)."""
    if state.count < 2:
        raise ValueError(f"variance is undefined for {state.count} observation(s)")
    return state.m2 / (state.count - 1)


# --- P-squared ---


@dataclass(frozen=True)
class P2State:
    """
    Marker set for one target quantile. Until five observations have
    arrived, heights holds the raw observations in arrival order.
    """

    q: float
    count: int = 0
    heights: Tuple[float, ...] = ()
    positions: Tuple[int, ...] = (1, 2, 3, 4, 5)
    desired: Tuple[float, ...] = ()

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise ValueError(f"P2 target quantile must be in (0, 1), got {self.q}")


def _increments(q: float) -> Tuple[float, ...]:
    return (0.0, q / 2.0, q, (1.0 + q) / 2.0, 1.0)


def _parabolic(h, n, i: int, d: int) -> float:
    return h[i] + d / (n[i + 1] - n[i - 1]) * (
        (n[i] - n[i - 1] + d) * (h[i + 1] - h[i]) / (n[i + 1] - n[i])
        + (n[i + 1] - n[i] - d) * (h[i] - h[i - 1]) / (n[i] - n[i - 1])
    )


def _linear(h, n, i: int, d: int) -> float:
    return h[i] + d * (h[i + d] - h[i]) / (n[i + d] - n[i])


def _check_markers(h, n, count: int):
    if any(h[i] > h[i + 1] for i in range(4)):
        raise InvariantViolation(f"P2 marker heights out of order: {h}")
    if any(n[i] >= n[i + 1] for i in range(4)) or n[0] < 1 or n[4] > count:
        raise InvariantViolation(f"P2 marker positions invalid: {n} after {count} observations")


def p2_update(state: P2State, x: float) -> P2State:
    x = float(x)
    count = state.count + 1

    if count < 5:
        return replace(state, count=count, heights=state.heights + (x,))
    if count == 5:
        q = state.q
        return replace(
            state,
            count=count,
            heights=tuple(sorted(state.heights + (x,))),
            positions=(1, 2, 3, 4, 5),
            desired=(1.0, 1.0 + 2.0 * q, 1.0 + 4.0 * q, 3.0 + 2.0 * q, 5.0),
        )

    h = list(state.heights)
    n = list(state.positions)

    # cell k holds x; extremes replace the outer markers
    if x < h[0]:
        h[0] = x
        k = 0
    elif x >= h[4]:
        h[4] = x
        k = 3
    else:
        k = next(i for i in range(4) if h[i] <= x < h[i + 1])

    for i in range(k + 1, 5):
        n[i] += 1
    desired = tuple(d + inc for d, inc in zip(state.desired, _increments(state.q)))

    for i in range(1, 4):
        gap = desired[i] - n[i]
        if (gap >= 1.0 and n[i + 1] - n[i] > 1) or (gap <= -1.0 and n[i - 1] - n[i] < -1):
            d = 1 if gap > 0 else -1
            candidate = _parabolic(h, n, i, d)
            if h[i - 1] < candidate < h[i + 1]:
                h[i] = candidate
            else:
                h[i] = _linear(h, n, i, d)
            n[i] += d

    _check_markers(h, n, count)
    return replace(state, count=count, heights=tuple(h), positions=tuple(n), desired=desired)


def p2_estimate(state: P2State) -> float:
    if state.count < 5:
        raise ValueError(f"P2 estimate needs 5 observations, only {state.count} seen")
    return state.heights[2]
