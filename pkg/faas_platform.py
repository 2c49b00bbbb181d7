"""
Model of the FaaS platform: worker nodes with a hidden speed, function
instances with their lifecycle, and the scheduler that hands queued
invocations to warm or newly started instances.
"""

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Deque, Dict, List, Optional

import numpy as np
from loguru import logger

from cost import AttemptRecord
from experiment_config import DistributionSpec, PlatformConfig
from sim_core import Engine, EventKind, InvariantViolation, RngStreams


class InstanceState(str, Enum):
    COLD_STARTING = "cold_starting"
    BENCHMARKING = "benchmarking"
    BUSY = "busy"
    WARM = "warm"
    TERMINATED = "terminated"


class Judgement(str, Enum):
    UNJUDGED = "unjudged"
    PASSED = "passed"
    EXEMPT = "exempt"


# Benchmarking is the first phase of every cold-start attempt (prepare, plus
# the benchmark when the policy runs one). Any live state may be terminated
# at experiment end.
_TRANSITIONS = {
    InstanceState.COLD_STARTING: {InstanceState.BENCHMARKING, InstanceState.TERMINATED},
    InstanceState.BENCHMARKING: {InstanceState.BUSY, InstanceState.TERMINATED},
    InstanceState.BUSY: {InstanceState.WARM, InstanceState.TERMINATED},
    InstanceState.WARM: {InstanceState.BUSY, InstanceState.TERMINATED},
    InstanceState.TERMINATED: set(),
}


@dataclass
class WorkerNode:
    node_id: int
    perf_factor: float
    capacity: int
    live: int = 0

    @property
    def has_capacity(self) -> bool:
        return self.live < self.capacity


@dataclass
class Invocation:
    invocation_id: int
    vu_id: int
    request_index: int
    submitted_at: int
    retry_count: int = 0
    phase_record: List[AttemptRecord] = field(default_factory=list)
    completed_at: Optional[int] = None

    @property
    def attempt_count(self) -> int:
        return len(self.phase_record)


@dataclass
class Instance:
    instance_id: int
    node_id: int
    perf_factor: float
    created_at: int
    last_used_at: int
    state: InstanceState = InstanceState.COLD_STARTING
    judged: Judgement = Judgement.UNJUDGED
    invocations_served: int = 0
    idle_timer: Optional[int] = None
    terminated_at: Optional[int] = None

    def transition(self, new_state: InstanceState):
        if new_state not in _TRANSITIONS[self.state]:
            raise InvariantViolation(
                f"Instance {self.instance_id}: illegal transition {self.state.value} -> {new_state.value}"
            )
        self.state = new_state


@dataclass(frozen=True)
class InstanceAssignment:
    instance: Instance
    cold_start: bool
    cold_start_delay_ms: int = 0


def sample_perf_factor(distribution: DistributionSpec, rng: np.random.Generator) -> float:
    """Strictly positive node speed multiplier (1.0 = nominal)."""
    factor = distribution.sample(rng)
    if not factor > 0:
        raise InvariantViolation(f"perf factor {factor} drawn from {distribution.name} is not positive")
    return factor


class Platform:
    """
    Shared state of one simulated deployment.

    The platform owns the queue, nodes and instances. What happens inside an
    attempt is up to the caller: `on_assigned` is invoked for every invocation
    the scheduler places.
    """

    def __init__(self, platform_config: PlatformConfig, engine: Engine, rng: RngStreams, stream_prefix: str = ""):
        self.config = platform_config
        self.engine = engine
        self._placement_rng = rng.stream(stream_prefix + "placement")
        self._cold_start_rng = rng.stream(stream_prefix + "cold_start")

        node_rng = rng.stream("node_perf")
        self.nodes: List[WorkerNode] = [
            WorkerNode(i, sample_perf_factor(platform_config.perf_distribution, node_rng), platform_config.node_capacity)
            for i in range(platform_config.node_pool_size)
        ]

        self.queue: Deque[Invocation] = deque()
        self.instances: Dict[int, Instance] = {}
        self._warm: Dict[int, Instance] = {}
        self.in_flight: Dict[int, Invocation] = {}
        self.submitted = 0
        self.completed = 0
        self.cold_starts = 0
        self._next_instance_id = 0
        self._dispatching = False
        self.on_assigned: Optional[Callable[[Invocation, InstanceAssignment], None]] = None

        engine.on(EventKind.INSTANCE_IDLE_TIMEOUT, self._on_idle_timeout)

    # --- queue ---

    def submit(self, invocation: Invocation, resubmission: bool = False):
        """Append an invocation to the queue tail and run the scheduler."""
        if resubmission:
            if self.in_flight.pop(invocation.invocation_id, None) is None:
                raise InvariantViolation(f"Invocation {invocation.invocation_id} re-queued while not in flight")
        else:
            if invocation.invocation_id in self.in_flight:
                raise InvariantViolation(f"Invocation {invocation.invocation_id} is already in flight")
            self.submitted += 1
        self.queue.append(invocation)
        self.dispatch()

    def dispatch(self):
        """Place queued invocations, head first, until one finds no capacity."""
        if self._dispatching:
            return
        self._dispatching = True
        try:
            while self.queue:
                assignment = self.assign(self.queue[0])
                if assignment is None:
                    break
                invocation = self.queue.popleft()
                self.in_flight[invocation.invocation_id] = invocation
                if self.on_assigned is not None:
                    self.on_assigned(invocation, assignment)
        finally:
            self._dispatching = False

    def assign(self, invocation: Invocation) -> Optional[InstanceAssignment]:
        """
        Choose an instance for the invocation at the queue head.

        The least recently used warm instance wins; otherwise a new instance
        starts on a node drawn uniformly among those with spare capacity.
        None is the no-capacity marker: the invocation stays queued.
        """
        if self._warm and self.config.warm_reuse:
            instance = min(self._warm.values(), key=lambda i: (i.last_used_at, i.instance_id))
            del self._warm[instance.instance_id]
            if instance.idle_timer is not None:
                self.engine.cancel(instance.idle_timer)
                instance.idle_timer = None
            instance.transition(InstanceState.BUSY)
            return InstanceAssignment(instance, cold_start=False)

        candidates = [node for node in self.nodes if node.has_capacity]
        if not candidates:
            return None
        node = candidates[int(self._placement_rng.integers(len(candidates)))]
        node.live += 1
        if node.live > node.capacity:
            raise InvariantViolation(f"Node {node.node_id} over capacity ({node.live}/{node.capacity})")

        now = self.engine.now
        instance = Instance(self._next_instance_id, node.node_id, node.perf_factor, created_at=now, last_used_at=now)
        self._next_instance_id += 1
        self.instances[instance.instance_id] = instance
        self.cold_starts += 1
        delay = self.config.cold_start_delay.sample_ms(self._cold_start_rng)
        return InstanceAssignment(instance, cold_start=True, cold_start_delay_ms=delay)

    # --- instance lifecycle ---

    def begin_attempt(self, instance: Instance):
        """Cold start finished; the first attempt's prepare phase begins."""
        instance.transition(InstanceState.BENCHMARKING)

    def start_compute(self, instance: Instance):
        if instance.state is InstanceState.BENCHMARKING:
            instance.transition(InstanceState.BUSY)

    def complete(self, invocation: Invocation, now: int):
        if self.in_flight.pop(invocation.invocation_id, None) is None:
            raise InvariantViolation(f"Invocation {invocation.invocation_id} completed while not in flight")
        invocation.completed_at = now
        self.completed += 1

    def release(self, instance: Instance, now: int):
        """Attempt finished: the instance turns warm and its idle timer starts."""
        instance.transition(InstanceState.WARM)
        instance.last_used_at = now
        instance.invocations_served += 1
        if not self.config.warm_reuse:
            # no reuse: the instance is retired as soon as it goes idle
            self._terminate(instance, now)
            self.dispatch()
            return
        instance.idle_timer = self.engine.schedule(
            now + self.config.idle_timeout_ms, EventKind.INSTANCE_IDLE_TIMEOUT, instance.instance_id
        )
        self._warm[instance.instance_id] = instance
        self.dispatch()

    def expire_idle(self, instance: Instance, now: int) -> bool:
        """Terminate a warm instance whose idle timeout has elapsed. Returns False otherwise."""
        if instance.state is not InstanceState.WARM or now - instance.last_used_at < self.config.idle_timeout_ms:
            return False
        self._warm.pop(instance.instance_id, None)
        instance.idle_timer = None
        self._terminate(instance, now)
        self.dispatch()
        return True

    def crash_instance(self, instance: Instance):
        """
        Self-termination requested by the policy. The caller re-queues the
        instance's invocation first; capacity is freed in the same instant.
        """
        if instance.state is InstanceState.TERMINATED:
            return
        if instance.state not in (InstanceState.BENCHMARKING, InstanceState.BUSY):
            raise InvariantViolation(f"Instance {instance.instance_id} cannot crash while {instance.state.value}")
        self._terminate(instance, self.engine.now)
        self.dispatch()

    def shutdown(self, now: int):
        """Experiment end: every live instance is terminated."""
        for instance in self.instances.values():
            if instance.state is not InstanceState.TERMINATED:
                if instance.idle_timer is not None:
                    self.engine.cancel(instance.idle_timer)
                    instance.idle_timer = None
                self._terminate(instance, now)
        self._warm.clear()

    def _terminate(self, instance: Instance, now: int):
        instance.transition(InstanceState.TERMINATED)
        instance.terminated_at = now
        node = self.nodes[instance.node_id]
        node.live -= 1
        if node.live < 0:
            raise InvariantViolation(f"Node {node.node_id} released more instances than it placed")

    def _on_idle_timeout(self, event):
        instance = self.instances[event.payload]
        instance.idle_timer = None
        self.expire_idle(instance, event.fire_at)

    # --- accounting ---

    @property
    def warm_count(self) -> int:
        return len(self._warm)

    def live_instances(self) -> List[Instance]:
        return [i for i in self.instances.values() if i.state is not InstanceState.TERMINATED]

    def check_conservation(self, _event=None):
        """submitted == completed + queued + in flight, after every event."""
        accounted = self.completed + len(self.queue) + len(self.in_flight)
        if self.submitted != accounted:
            raise InvariantViolation(
                f"Conservation broken at t={self.engine.now}: submitted={self.submitted}, "
                f"completed={self.completed}, queued={len(self.queue)}, in_flight={len(self.in_flight)}"
            )

    def log_state(self):
        logger.debug(
            f"Platform at t={self.engine.now}: {self.cold_starts} cold starts, "
            f"{len(self.live_instances())} live instances, {self.warm_count} warm, {len(self.queue)} queued"
        )
