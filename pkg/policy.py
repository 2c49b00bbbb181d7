"""
Instance selection policy.

Every cold start runs a benchmark alongside the prepare phase. Instances that
miss the elysium threshold re-queue their invocation and crash; invocations
that already caused retry_cap terminations are accepted without a benchmark.
The threshold comes from a fixed value, a pre-test, or an online estimator.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from cost import CostParams
from estimators import P2State, WelfordState, nearest_rank, p2_estimate, p2_update, welford_update
from experiment_config import PolicyConfig
from faas_platform import Instance, Invocation, Judgement
from sim_core import InvariantViolation


class Decision(str, Enum):
    PASS = "pass"
    TERMINATE = "terminate"
    EXEMPT_PASS = "exempt_pass"


class PolicyMode(str, Enum):
    DISABLED = "disabled"
    OBSERVE = "observe"  # pre-test: benchmark, never terminate
    ENFORCE = "enforce"


@dataclass(frozen=True)
class ElysiumThreshold:
    """Benchmark score (ms, lower is better) an instance must not exceed."""

    value: float
    target_pass_fraction: float = 1.0

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError(f"threshold must be > 0, got {self.value}")
        if not 0.0 < self.target_pass_fraction <= 1.0:
            raise ValueError(f"pass fraction must be in (0, 1], got {self.target_pass_fraction}")

    @classmethod
    def disabled(cls) -> "ElysiumThreshold":
        return cls(math.inf, 1.0)


@dataclass(frozen=True)
class BenchmarkResult:
    instance_id: int
    score: float
    measured_at: int

    def __post_init__(self):
        if not self.score > 0:
            raise ValueError(f"benchmark score must be > 0, got {self.score}")


@dataclass(frozen=True)
class ColdStartPlan:
    """What the instance will do once its parallel phase is over."""

    decision: Decision
    result: Optional[BenchmarkResult]
    benchmark_ms: int
    threshold: ElysiumThreshold
    enforced: bool = True


def judge(result: BenchmarkResult, threshold: ElysiumThreshold) -> Decision:
    """Local decision on one value; ties pass."""
    return Decision.PASS if result.score <= threshold.value else Decision.TERMINATE


def observe_benchmark_score(
    perf_factor: float, benchmark_base_ms: float, noise_sigma: float, rng: Optional[np.random.Generator]
) -> float:
    """Observed ms for the fixed benchmark: base / perf scaled by (1 + N(0, sigma))."""
    noise = float(rng.normal(0.0, noise_sigma)) if noise_sigma > 0 else 0.0
    return benchmark_base_ms / perf_factor * max(1.0 + noise, 1e-3)


def calibrate_pretest(
    samples: Sequence[Union[BenchmarkResult, float]], pass_fraction: float
) -> ElysiumThreshold:
    """Nearest-rank pass_fraction-quantile of the pre-test scores."""
    scores = [s.score if isinstance(s, BenchmarkResult) else float(s) for s in samples]
    if not scores:
        raise ValueError("cannot calibrate a threshold from an empty sample")
    return ElysiumThreshold(nearest_rank(scores, pass_fraction), pass_fraction)


# --- retry law ---


def consecutive_failure_probability(p_terminate: float, n: int) -> float:
    return p_terminate**n


def expected_terminations(p_terminate: float, retry_cap: int) -> float:
    """Mean terminations per invocation when the count is capped at retry_cap."""
    return sum(p_terminate**k for k in range(1, retry_cap + 1))


def retry_cap_for(p_terminate: float, tolerance: float) -> int:
    """Smallest cap whose chance of being reached is below tolerance."""
    if not 0 < p_terminate < 1 or not 0 < tolerance < 1:
        raise ValueError("probabilities must be in (0, 1)")
    cap = 1
    while p_terminate**cap >= tolerance:
        cap += 1
    return cap


def expected_cost_per_request(
    scores: Sequence[float],
    pass_fraction: float,
    retry_cap: int,
    cost: CostParams,
    prepare_ms: float,
    compute_base_ms: float,
    benchmark_base_ms: float,
    requests_per_instance: float = 1.0,
) -> float:
    """
    Expected nano-currency per request when instances are selected at
    `pass_fraction`, estimated from observed benchmark scores. A selected
    instance serves `requests_per_instance` requests: one cold, the rest warm.
    """
    s = np.asarray(scores, dtype=float)
    if len(s) == 0:
        raise ValueError("need benchmark scores to estimate a cost")
    if requests_per_instance < 1:
        raise ValueError("an instance serves at least one request")

    threshold = nearest_rank(s.tolist(), pass_fraction)
    passing, failing = s[s <= threshold], s[s > threshold]
    p_terminate = len(failing) / len(s)
    compute = compute_base_ms * s / benchmark_base_ms
    compute_passing = compute[s <= threshold]

    def attempt(ms: float) -> float:
        return cost.c_exec_nano * ms + cost.c_inv_nano

    terminated = attempt(float(np.mean(np.maximum(prepare_ms, failing)))) if len(failing) else 0.0
    passed_cold = attempt(float(np.mean(np.maximum(prepare_ms, passing) + compute_passing)))
    passed_warm = attempt(prepare_ms + float(np.mean(compute_passing)))
    exempt = attempt(prepare_ms + float(np.mean(compute)))

    k = requests_per_instance
    capped = consecutive_failure_probability(p_terminate, retry_cap)
    total = (
        expected_terminations(p_terminate, retry_cap) * terminated
        + (1 - capped) * (passed_cold + (k - 1) * passed_warm)
        + capped * k * exempt
    )
    return total / k


def cost_optimal_pass_fraction(
    scores: Sequence[float],
    retry_cap: int,
    cost: CostParams,
    prepare_ms: float,
    compute_base_ms: float,
    benchmark_base_ms: float,
    requests_per_instance: float = 1.0,
    candidates: Optional[Sequence[float]] = None,
) -> float:
    """Candidate pass fraction with the lowest expected cost per request; ties go to the larger fraction."""
    if candidates is None:
        candidates = np.round(np.arange(0.05, 1.0001, 0.05), 2)
    best, best_cost = None, math.inf
    for fraction in sorted((float(c) for c in candidates), reverse=True):
        expected = expected_cost_per_request(
            scores, fraction, retry_cap, cost, prepare_ms, compute_base_ms, benchmark_base_ms, requests_per_instance
        )
        if expected < best_cost:
            best, best_cost = fraction, expected
    if best is None:
        raise ValueError("no candidate pass fractions")
    logger.debug(f"Cost-optimal pass fraction {best:.2f} at {best_cost:.0f} nano per request")
    return best


# --- online threshold ---


def online_threshold_tick(p2_state: P2State, current: ElysiumThreshold) -> ElysiumThreshold:
    """Replace the threshold by the current quantile estimate once five results exist."""
    if p2_state.count < 5:
        return current
    return ElysiumThreshold(p2_estimate(p2_state), current.target_pass_fraction)


class OnlineThresholdEstimator:
    """
    Central collector for benchmark results. It keeps constant-size state and
    publishes a new threshold on each tick; ticks inside an outage window are
    skipped and the last published value stays in force.
    """

    def __init__(
        self,
        pass_fraction: float,
        initial: ElysiumThreshold,
        outages: Sequence[Tuple[int, int]] = (),
    ):
        self.p2 = P2State(q=pass_fraction)
        self.welford = WelfordState()
        self.current = ElysiumThreshold(initial.value, pass_fraction)
        self.outages = list(outages)
        self.skipped_ticks = 0
        self.history: List[Tuple[int, float]] = []

    def observe(self, result: BenchmarkResult):
        self.p2 = p2_update(self.p2, result.score)
        self.welford = welford_update(self.welford, result.score)

    def in_outage(self, now: int) -> bool:
        return any(start <= now < end for start, end in self.outages)

    def tick(self, now: int) -> ElysiumThreshold:
        if self.in_outage(now):
            self.skipped_ticks += 1
            logger.warning(f"Threshold collector unavailable at t={now}; keeping {self.current.value:.2f} ms")
            return self.current
        updated = online_threshold_tick(self.p2, self.current)
        if updated != self.current:
            self.history.append((now, updated.value))
        self.current = updated
        return self.current


class MinosPolicy:
    """
    Cold-start judging for one deployment.

    `resubmit` puts an invocation back on the platform queue and `crash`
    terminates an instance; both are platform operations passed in by the
    simulation so the policy stays testable on its own.
    """

    def __init__(
        self,
        policy_config: PolicyConfig,
        mode: PolicyMode,
        threshold: ElysiumThreshold,
        benchmark_base_ms: float,
        rng: Optional[np.random.Generator],
        resubmit: Callable[[Invocation], None],
        crash: Callable[[Instance], None],
        estimator: Optional[OnlineThresholdEstimator] = None,
    ):
        self.config = policy_config
        self.mode = mode
        self.threshold = threshold
        self.benchmark_ms_nominal = benchmark_base_ms * policy_config.benchmark_work
        self._rng = rng
        self._resubmit = resubmit
        self._crash = crash
        self.estimator = estimator
        self.results: List[BenchmarkResult] = []
        self.terminations = 0
        self.exemptions = 0
        self.passes = 0
        self.score_stats = WelfordState()
        self.history: List[Tuple[int, float]] = []

    @property
    def enabled(self) -> bool:
        return self.mode is not PolicyMode.DISABLED

    def on_cold_start(self, invocation: Invocation, instance: Instance, now: int) -> ColdStartPlan:
        """
        Decide the fate of a freshly started instance. The threshold is read
        once, here; a later update never reaches an attempt already running.
        """
        if not self.enabled:
            raise InvariantViolation("on_cold_start called with the policy disabled")

        if self.mode is PolicyMode.ENFORCE and invocation.retry_count >= self.config.retry_cap:
            instance.judged = Judgement.EXEMPT
            self.exemptions += 1
            return ColdStartPlan(Decision.EXEMPT_PASS, None, 0, self.threshold)

        score = observe_benchmark_score(
            instance.perf_factor, self.benchmark_ms_nominal, self.config.benchmark_noise_sigma, self._rng
        )
        benchmark_ms = int(math.ceil(score))
        result = BenchmarkResult(instance.instance_id, score, now + benchmark_ms)
        if self.mode is PolicyMode.OBSERVE:
            return ColdStartPlan(Decision.PASS, result, benchmark_ms, self.threshold, enforced=False)
        return ColdStartPlan(judge(result, self.threshold), result, benchmark_ms, self.threshold)

    def settle(self, plan: ColdStartPlan, invocation: Invocation, instance: Instance) -> Decision:
        """Apply a plan once prepare and benchmark are both done."""
        if plan.result is not None:
            self.results.append(plan.result)
            self.score_stats = welford_update(self.score_stats, plan.result.score)
            if self.estimator is not None:
                self.estimator.observe(plan.result)

        if plan.decision is Decision.TERMINATE:
            self.requeue(invocation)
            self._crash(instance)
        elif plan.decision is Decision.PASS:
            self.passes += 1
            if plan.enforced:
                instance.judged = Judgement.PASSED
        return plan.decision

    def requeue(self, invocation: Invocation):
        """
        Put a failed invocation back on the queue tail with one more retry.
        The caller has already filed the failed attempt as a terminated record.
        """
        invocation.retry_count += 1
        self.terminations += 1
        if invocation.retry_count > self.config.retry_cap:
            raise InvariantViolation(
                f"Invocation {invocation.invocation_id} exceeded the retry cap ({invocation.retry_count})"
            )
        if invocation.retry_count == self.config.retry_cap:
            logger.debug(f"Invocation {invocation.invocation_id} reached the retry cap; next cold start is exempt")
        self._resubmit(invocation)

    def enforce(self, threshold: ElysiumThreshold, now: int):
        """Start judging with `threshold`; attempts already planned keep their observe-only plan."""
        if self.mode is not PolicyMode.OBSERVE:
            raise InvariantViolation(f"cannot switch a {self.mode.value} policy to enforcement")
        self.mode = PolicyMode.ENFORCE
        self.threshold = threshold
        self.history.append((now, threshold.value))
        logger.info(f"Enforcing elysium threshold {threshold.value:.2f} ms from t={now}")

    def tick(self, now: int) -> ElysiumThreshold:
        if self.estimator is not None:
            self.threshold = self.estimator.tick(now)
        return self.threshold
