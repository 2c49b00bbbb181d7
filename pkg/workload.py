"""
Closed-loop workload and function body.

Each virtual user sends a request, waits for it to complete, thinks for a
fixed time and sends the next one. A request runs a network-bound prepare
phase (unaffected by node speed) followed by a CPU-bound compute phase whose
duration scales with 1 / perf_factor. On a cold start with the policy on,
the benchmark runs in parallel with prepare.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

from loguru import logger

from cost import AttemptClass, AttemptRecord
from estimators import WelfordState
from experiment_config import ExperimentConfig, ThresholdMode
from faas_platform import Instance, InstanceAssignment, Invocation, Platform
from policy import (
    BenchmarkResult,
    ColdStartPlan,
    Decision,
    ElysiumThreshold,
    MinosPolicy,
    OnlineThresholdEstimator,
    PolicyMode,
    calibrate_pretest,
)
from sim_core import Engine, EventKind, InvariantViolation, RngStreams


class CalibrationError(ValueError):
    """No benchmark scores to derive a threshold from."""


class RunMode(str, Enum):
    BASELINE = "baseline"
    MINOS = "minos"
    PRETEST = "pretest"


class Phase(str, Enum):
    COLD_START = "cold_start"
    PREPARE = "prepare"
    COMPUTE = "compute"


@dataclass
class VirtualUser:
    vu_id: int
    requests_sent: int = 0
    completions: int = 0
    active: Optional[int] = None


@dataclass
class ActiveAttempt:
    invocation: Invocation
    instance: Instance
    attempt_index: int
    cold: bool
    started_at: int
    prepare_ms: int
    compute_ms: int
    plan: Optional[ColdStartPlan] = None

    @property
    def benchmark_ms(self) -> int:
        return self.plan.benchmark_ms if self.plan is not None else 0

    @property
    def benchmark_score(self) -> Optional[float]:
        return self.plan.result.score if self.plan is not None and self.plan.result is not None else None

    @property
    def parallel_ms(self) -> int:
        return max(self.prepare_ms, self.benchmark_ms) if self.cold else self.prepare_ms


@dataclass
class SimulationResult:
    mode: RunMode
    policy_mode: PolicyMode
    seed: int
    duration_ms: int
    attempts: List[AttemptRecord]
    invocations: List[Invocation]
    instances: List[Instance]
    users: List[VirtualUser]
    benchmark_results: List[BenchmarkResult]
    threshold: Optional[ElysiumThreshold]
    threshold_history: List[Tuple[int, float]]
    score_stats: WelfordState
    terminations: int
    exemptions: int
    cold_starts: int
    events_processed: int
    engine_trace: Optional[List[Tuple[int, int, str, str]]] = None

    @property
    def submitted(self) -> int:
        return len(self.invocations)

    @property
    def completed(self) -> int:
        return sum(1 for inv in self.invocations if inv.completed_at is not None)

    @property
    def incomplete(self) -> int:
        return self.submitted - self.completed


def compute_duration_ms(compute_base_ms: float, perf_factor: float) -> int:
    return int(math.ceil(compute_base_ms / perf_factor))


class Simulation:
    """
    One run of one deployment: baseline (policy off), minos (policy
    enforcing) or pretest (policy observing on fresh instances).
    """

    def __init__(
        self,
        experiment: ExperimentConfig,
        seed: int,
        mode: RunMode,
        threshold: Optional[ElysiumThreshold] = None,
        vu_count: Optional[int] = None,
        duration_ms: Optional[int] = None,
        record_trace: bool = False,
    ):
        self.experiment = experiment
        self.seed = seed
        self.mode = mode
        workload = experiment.workload
        pretest = mode is RunMode.PRETEST
        self.vu_count = vu_count or (workload.pretest_vu_count if pretest else workload.vu_count)
        self.duration_ms = duration_ms or (workload.pretest_duration_ms if pretest else workload.duration_ms)
        self.think_time_ms = workload.think_time_ms
        self.function = experiment.function

        # The pre-test shares the node pool with the main runs but draws its
        # placements, start delays and noise from separate streams.
        self._prefix = "pretest/" if pretest else ""
        self.engine = Engine(record_trace=record_trace)
        self.rng = RngStreams(seed)

        platform_config = experiment.platform
        if pretest and workload.pretest_cold_only:
            platform_config = platform_config.model_copy(update={"warm_reuse": False})
        self.platform = Platform(platform_config, self.engine, self.rng, stream_prefix=self._prefix)
        self.platform.on_assigned = self._on_assigned

        self.policy = self._build_policy(threshold)

        self.users = [VirtualUser(i) for i in range(self.vu_count)]
        self.invocations: Dict[int, Invocation] = {}
        self.attempts: List[AttemptRecord] = []
        self._active: Dict[int, ActiveAttempt] = {}
        self._starting: Dict[int, Invocation] = {}
        self.ended = False

        self.engine.on(EventKind.VU_THINK_DONE, self._on_think_done)
        self.engine.on(EventKind.INVOCATION_ARRIVAL, self._on_arrival)
        self.engine.on(EventKind.PHASE_COMPLETE, self._on_phase_complete)
        self.engine.on(EventKind.BENCHMARK_COMPLETE, self._on_benchmark_complete)
        self.engine.on(EventKind.EXPERIMENT_END, self._on_experiment_end)
        self.engine.on(EventKind.THRESHOLD_TICK, self._on_threshold_tick)
        self.engine.on(EventKind.WARMUP_END, self._on_warmup_end)
        self.engine.add_observer(self.platform.check_conservation)

    def _build_policy(self, threshold: Optional[ElysiumThreshold]) -> MinosPolicy:
        policy_config = self.experiment.policy
        if self.mode is RunMode.PRETEST:
            policy_mode = PolicyMode.OBSERVE
        elif self.mode is RunMode.MINOS and policy_config.enabled:
            # warm-up runs observe first and switch to enforcing once calibrated
            warmup = policy_config.threshold_mode is ThresholdMode.WARMUP
            policy_mode = PolicyMode.OBSERVE if warmup else PolicyMode.ENFORCE
        else:
            policy_mode = PolicyMode.DISABLED

        estimator = None
        if policy_mode is PolicyMode.ENFORCE and threshold is None:
            if policy_config.threshold_mode is ThresholdMode.PRETEST:
                raise ValueError("minos runs in pretest mode need the calibrated threshold")
            if policy_config.threshold_ms is not None:
                threshold = ElysiumThreshold(policy_config.threshold_ms, policy_config.pass_fraction)
            else:
                threshold = ElysiumThreshold.disabled()
        if policy_mode is PolicyMode.ENFORCE and policy_config.threshold_mode is ThresholdMode.ONLINE:
            estimator = OnlineThresholdEstimator(policy_config.pass_fraction, threshold, policy_config.online_outages)
            threshold = estimator.current

        return MinosPolicy(
            policy_config,
            policy_mode,
            threshold or ElysiumThreshold.disabled(),
            self.function.benchmark_base_ms,
            self.rng.stream(self._prefix + "benchmark_noise"),
            resubmit=lambda invocation: self.platform.submit(invocation, resubmission=True),
            crash=self.platform.crash_instance,
            estimator=estimator,
        )

    @property
    def warming_up(self) -> bool:
        return self.mode is RunMode.MINOS and self.policy.mode is PolicyMode.OBSERVE

    # --- run ---

    def run(self) -> SimulationResult:
        for user in self.users:
            self.engine.schedule(0, EventKind.VU_THINK_DONE, user.vu_id)
        self.engine.schedule(self.duration_ms, EventKind.EXPERIMENT_END)
        if self.policy.estimator is not None:
            period = self.experiment.policy.online_period_ms
            if period <= self.duration_ms:
                self.engine.schedule(period, EventKind.THRESHOLD_TICK)
        if self.warming_up and self.experiment.policy.warmup_ms < self.duration_ms:
            self.engine.schedule(self.experiment.policy.warmup_ms, EventKind.WARMUP_END)

        self.engine.run_until(self.duration_ms)
        self._truncate_in_flight(self.duration_ms)
        self.platform.shutdown(self.duration_ms)
        self.platform.log_state()

        result = SimulationResult(
            mode=self.mode,
            policy_mode=self.policy.mode,
            seed=self.seed,
            duration_ms=self.duration_ms,
            attempts=self.attempts,
            invocations=list(self.invocations.values()),
            instances=list(self.platform.instances.values()),
            users=self.users,
            benchmark_results=self.policy.results,
            threshold=self.policy.threshold if self.policy.mode is PolicyMode.ENFORCE else None,
            threshold_history=list(self.policy.estimator.history if self.policy.estimator else self.policy.history),
            score_stats=self.policy.score_stats,
            terminations=self.policy.terminations,
            exemptions=self.policy.exemptions,
            cold_starts=self.platform.cold_starts,
            events_processed=self.engine.processed,
            engine_trace=self.engine.trace,
        )
        logger.debug(
            f"{self.mode.value} run (seed {self.seed}) finished: {result.completed}/{result.submitted} completed, "
            f"{result.terminations} terminations, {result.exemptions} exempt, {result.events_processed} events"
        )
        return result

    # --- virtual users ---

    def vu_loop(self, vu_id: int):
        """Send the VU's next request, unless the experiment window has closed."""
        now = self.engine.now
        if self.ended or now >= self.duration_ms:
            return
        user = self.users[vu_id]
        if user.active is not None:
            raise InvariantViolation(f"VU {vu_id} already has invocation {user.active} in flight")

        invocation = Invocation(
            invocation_id=len(self.invocations),
            vu_id=vu_id,
            request_index=user.requests_sent,
            submitted_at=now,
        )
        self.invocations[invocation.invocation_id] = invocation
        user.requests_sent += 1
        user.active = invocation.invocation_id
        self.engine.schedule(now, EventKind.INVOCATION_ARRIVAL, invocation.invocation_id)

    def _on_think_done(self, event):
        self.vu_loop(event.payload)

    def _on_arrival(self, event):
        self.platform.submit(self.invocations[event.payload])

    # --- attempts ---

    def _on_assigned(self, invocation: Invocation, assignment: InstanceAssignment):
        instance = assignment.instance
        if assignment.cold_start:
            self._starting[instance.instance_id] = invocation
            self.engine.schedule_in(
                assignment.cold_start_delay_ms,
                EventKind.PHASE_COMPLETE,
                (Phase.COLD_START.value, instance.instance_id),
            )
        else:
            self.execute_attempt(invocation, instance, cold=False)

    def _draw_prepare_ms(self, invocation: Invocation, attempt_index: int) -> int:
        spec = self.function.prepare_ms
        if spec.is_constant:
            return spec.sample_ms(None, minimum=1)
        # keyed so paired runs see the same prepare time for the same request
        rng = self.rng.keyed(self._prefix + "prepare", invocation.vu_id, invocation.request_index, attempt_index)
        return spec.sample_ms(rng, minimum=1)

    def execute_attempt(self, invocation: Invocation, instance: Instance, cold: bool) -> ActiveAttempt:
        """
        Start one attempt. Cold: prepare runs alongside the benchmark and the
        policy decides at the later of the two; warm: prepare then compute.
        The attempt's record is filed when it completes, crashes or is cut off.
        """
        now = self.engine.now
        attempt = ActiveAttempt(
            invocation=invocation,
            instance=instance,
            attempt_index=invocation.attempt_count,
            cold=cold,
            started_at=now,
            prepare_ms=self._draw_prepare_ms(invocation, invocation.attempt_count),
            compute_ms=compute_duration_ms(self.function.compute_base_ms, instance.perf_factor),
        )
        self._active[instance.instance_id] = attempt

        if cold and self.policy.enabled:
            attempt.plan = self.policy.on_cold_start(invocation, instance, now)
            if attempt.plan.result is not None:
                self.engine.schedule(
                    now + attempt.parallel_ms, EventKind.BENCHMARK_COMPLETE, instance.instance_id
                )
                return attempt
        self.engine.schedule(
            now + attempt.prepare_ms, EventKind.PHASE_COMPLETE, (Phase.PREPARE.value, instance.instance_id)
        )
        return attempt

    def _on_phase_complete(self, event):
        phase, instance_id = event.payload
        if phase == Phase.COLD_START.value:
            invocation = self._starting.pop(instance_id)
            instance = self.platform.instances[instance_id]
            self.platform.begin_attempt(instance)
            self.execute_attempt(invocation, instance, cold=True)
        elif phase == Phase.PREPARE.value:
            self._start_compute(self._active[instance_id])
        else:
            self._finish(self._active[instance_id])

    def _on_benchmark_complete(self, event):
        attempt = self._active[event.payload]
        if attempt.plan.decision is Decision.TERMINATE:
            self._file(attempt, AttemptClass.TERMINATED, ended_at=self.engine.now)
            self.policy.settle(attempt.plan, attempt.invocation, attempt.instance)
        else:
            self.policy.settle(attempt.plan, attempt.invocation, attempt.instance)
            self._start_compute(attempt)

    def _start_compute(self, attempt: ActiveAttempt):
        self.platform.start_compute(attempt.instance)
        self.engine.schedule_in(
            attempt.compute_ms, EventKind.PHASE_COMPLETE, (Phase.COMPUTE.value, attempt.instance.instance_id)
        )

    def _finish(self, attempt: ActiveAttempt):
        now = self.engine.now
        invocation = attempt.invocation
        classification = AttemptClass.PASSED_COLD_START if attempt.cold else AttemptClass.WARM_REUSE
        self.platform.complete(invocation, now)
        self._file(attempt, classification, ended_at=now, compute_ms=attempt.compute_ms, completed_at=now)
        self.platform.release(attempt.instance, now)

        user = self.users[invocation.vu_id]
        user.active = None
        user.completions += 1
        self.engine.schedule(now + self.think_time_ms, EventKind.VU_THINK_DONE, user.vu_id)

    def _file(
        self,
        attempt: ActiveAttempt,
        classification: AttemptClass,
        ended_at: int,
        prepare_ms: Optional[int] = None,
        benchmark_ms: Optional[int] = None,
        compute_ms: int = 0,
        completed_at: Optional[int] = None,
        truncated: bool = False,
    ) -> AttemptRecord:
        invocation, instance = attempt.invocation, attempt.instance
        record = AttemptRecord(
            invocation_id=invocation.invocation_id,
            vu_id=invocation.vu_id,
            attempt_index=attempt.attempt_index,
            classification=classification,
            instance_id=instance.instance_id,
            node_id=instance.node_id,
            perf_factor=instance.perf_factor,
            judged=instance.judged.value,
            retry_count=invocation.retry_count,
            prepare_ms=attempt.prepare_ms if prepare_ms is None else prepare_ms,
            benchmark_ms=attempt.benchmark_ms if benchmark_ms is None else benchmark_ms,
            benchmark_score=attempt.benchmark_score,
            compute_ms=compute_ms,
            submitted_at=invocation.submitted_at,
            started_at=attempt.started_at,
            ended_at=ended_at,
            completed_at=completed_at,
            truncated=truncated,
        )
        invocation.phase_record.append(record)
        self.attempts.append(record)
        del self._active[instance.instance_id]
        return record

    def _truncate_in_flight(self, t_end: int):
        """Close attempts still running at the cutoff, billed for what has elapsed."""
        for attempt in list(self._active.values()):
            elapsed = t_end - attempt.started_at
            if elapsed <= 0:
                del self._active[attempt.instance.instance_id]
                continue
            terminating = attempt.plan is not None and attempt.plan.decision is Decision.TERMINATE
            if terminating:
                classification = AttemptClass.TERMINATED
            elif attempt.cold:
                classification = AttemptClass.PASSED_COLD_START
            else:
                classification = AttemptClass.WARM_REUSE
            compute = 0 if terminating else min(attempt.compute_ms, max(0, elapsed - attempt.parallel_ms))
            self._file(
                attempt,
                classification,
                ended_at=t_end,
                prepare_ms=min(attempt.prepare_ms, elapsed),
                benchmark_ms=min(attempt.benchmark_ms, elapsed),
                compute_ms=compute,
                truncated=True,
            )

    # --- control events ---

    def _on_experiment_end(self, event):
        self.ended = True
        logger.debug(f"{self.mode.value} run reached the cutoff at t={event.fire_at}")

    def _on_threshold_tick(self, event):
        self.policy.tick(event.fire_at)
        period = self.experiment.policy.online_period_ms
        if event.fire_at + period <= self.duration_ms:
            self.engine.schedule(event.fire_at + period, EventKind.THRESHOLD_TICK)

    def _on_warmup_end(self, event):
        """Calibrate on the scores observed so far and start terminating slow instances."""
        warmup_ms = self.experiment.policy.warmup_ms
        if not self.policy.results:
            logger.warning(f"No benchmark scores by t={event.fire_at}; extending the warm-up by {warmup_ms} ms")
            if event.fire_at + warmup_ms < self.duration_ms:
                self.engine.schedule(event.fire_at + warmup_ms, EventKind.WARMUP_END)
            return
        threshold = calibrate_pretest(self.policy.results, self.experiment.policy.pass_fraction)
        logger.info(f"Warm-up over at t={event.fire_at}: {len(self.policy.results)} scores observed")
        self.policy.enforce(threshold, event.fire_at)


def run_simulation(
    experiment: ExperimentConfig,
    seed: int,
    mode: RunMode,
    threshold: Optional[ElysiumThreshold] = None,
    record_trace: bool = False,
) -> SimulationResult:
    return Simulation(experiment, seed, mode, threshold=threshold, record_trace=record_trace).run()


def run_pretest(experiment: ExperimentConfig, seed: int) -> List[BenchmarkResult]:
    """Observe-only run on the same platform; returns every benchmark score collected."""
    result = Simulation(experiment, seed, RunMode.PRETEST).run()
    if not result.benchmark_results:
        raise CalibrationError("pre-test collected no benchmark scores; lengthen pretest_duration_ms")
    logger.info(
        f"Pre-test (seed {seed}): {len(result.benchmark_results)} benchmark scores from "
        f"{result.submitted} requests, {result.terminations} terminations"
    )
    return result.benchmark_results


def resolve_threshold(
    experiment: ExperimentConfig, seed: int
) -> Tuple[Optional[ElysiumThreshold], List[BenchmarkResult]]:
    """Threshold for the minos arm, running the pre-test when the mode asks for it."""
    policy_config = experiment.policy
    if not policy_config.enabled or policy_config.threshold_mode is ThresholdMode.WARMUP:
        return None, []
    if policy_config.threshold_mode is ThresholdMode.PRETEST:
        samples = run_pretest(experiment, seed)
        threshold = calibrate_pretest(samples, policy_config.pass_fraction)
        logger.info(
            f"Elysium threshold for seed {seed}: {threshold.value:.2f} ms "
            f"(pass fraction {policy_config.pass_fraction:.2f})"
        )
        return threshold, samples
    if policy_config.threshold_ms is not None:
        return ElysiumThreshold(policy_config.threshold_ms, policy_config.pass_fraction), []
    return None, []
