import pytest

from experiment_config import DistributionSpec, PlatformConfig
from faas_platform import InstanceState, Invocation, Platform, sample_perf_factor
from sim_core import Engine, InvariantViolation, RngStreams


def _platform(seed=1, **overrides):
    settings = dict(
        node_pool_size=2,
        node_capacity=1,
        cold_start_delay=DistributionSpec.constant(100),
        idle_timeout_ms=1000,
        perf_distribution=DistributionSpec.constant(1.0),
    )
    settings.update(overrides)
    engine = Engine()
    platform = Platform(PlatformConfig(**settings), engine, RngStreams(seed))
    assigned = []
    platform.on_assigned = lambda invocation, assignment: assigned.append((invocation, assignment))
    return engine, platform, assigned


def _serve(platform, invocation, instance, now):
    """Run an attempt to completion and return the instance to the warm pool."""
    if instance.state is InstanceState.COLD_STARTING:
        platform.begin_attempt(instance)
    platform.start_compute(instance)
    platform.complete(invocation, now)
    platform.release(instance, now)


def test_first_invocation_cold_starts():
    _, platform, assigned = _platform()
    invocation = Invocation(0, 0, 0, 0)
    platform.submit(invocation)

    [(placed, assignment)] = assigned
    assert placed is invocation
    assert assignment.cold_start
    assert assignment.cold_start_delay_ms == 100
    assert assignment.instance.state is InstanceState.COLD_STARTING
    assert platform.cold_starts == 1
    platform.check_conservation()


def test_invocation_waits_when_no_node_has_capacity():
    _, platform, assigned = _platform()
    for i in range(3):
        platform.submit(Invocation(i, i, 0, 0))

    assert len(assigned) == 2
    assert [inv.invocation_id for inv in platform.queue] == [2]
    assert all(node.live == node.capacity for node in platform.nodes)
    platform.check_conservation()


def test_least_recently_used_warm_instance_is_reused():
    _, platform, assigned = _platform()
    first, second = Invocation(0, 0, 0, 0), Invocation(1, 1, 0, 0)
    platform.submit(first)
    platform.submit(second)
    (_, a), (_, b) = assigned
    _serve(platform, first, a.instance, now=20)
    _serve(platform, second, b.instance, now=10)
    assert platform.warm_count == 2

    platform.submit(Invocation(2, 0, 1, 30))

    _, reuse = assigned[-1]
    assert not reuse.cold_start
    assert reuse.instance is b.instance
    assert reuse.instance.state is InstanceState.BUSY
    assert reuse.instance.idle_timer is None
    assert platform.warm_count == 1
    platform.check_conservation()


def test_idle_instance_expires_and_frees_its_node():
    engine, platform, assigned = _platform()
    invocation = Invocation(0, 0, 0, 0)
    platform.submit(invocation)
    instance = assigned[0][1].instance
    _serve(platform, invocation, instance, now=0)

    engine.run_until(999)
    assert instance.state is InstanceState.WARM
    engine.run_until(1000)
    assert instance.state is InstanceState.TERMINATED
    assert instance.terminated_at == 1000
    assert platform.nodes[instance.node_id].live == 0
    assert platform.warm_count == 0


def test_crash_frees_capacity_for_the_queue_head():
    _, platform, assigned = _platform()
    invocations = [Invocation(i, i, 0, 0) for i in range(3)]
    for invocation in invocations:
        platform.submit(invocation)
    crashing = assigned[0][1].instance
    platform.begin_attempt(crashing)

    platform.submit(invocations[0], resubmission=True)
    assert [inv.invocation_id for inv in platform.queue] == [2, 0]
    platform.crash_instance(crashing)

    assert crashing.state is InstanceState.TERMINATED
    assert assigned[-1][0] is invocations[2]
    assert assigned[-1][1].instance.node_id == crashing.node_id
    assert [inv.invocation_id for inv in platform.queue] == [0]
    platform.check_conservation()


def test_illegal_transitions_are_invariant_violations():
    _, platform, assigned = _platform()
    invocation = Invocation(0, 0, 0, 0)
    platform.submit(invocation)
    instance = assigned[0][1].instance

    with pytest.raises(InvariantViolation):
        platform.release(instance, 0)
    _serve(platform, invocation, instance, now=5)
    with pytest.raises(InvariantViolation):
        platform.crash_instance(instance)


def test_resubmitting_an_invocation_not_in_flight_is_rejected():
    _, platform, _ = _platform()
    with pytest.raises(InvariantViolation):
        platform.submit(Invocation(0, 0, 0, 0), resubmission=True)


def test_without_warm_reuse_instances_retire_when_idle():
    _, platform, assigned = _platform(warm_reuse=False)
    invocation = Invocation(0, 0, 0, 0)
    platform.submit(invocation)
    instance = assigned[0][1].instance
    _serve(platform, invocation, instance, now=50)

    assert instance.state is InstanceState.TERMINATED
    assert platform.warm_count == 0
    platform.submit(Invocation(1, 0, 1, 60))
    assert assigned[-1][1].cold_start


def test_shutdown_terminates_everything_and_cancels_timers():
    engine, platform, assigned = _platform()
    first, second = Invocation(0, 0, 0, 0), Invocation(1, 1, 0, 0)
    platform.submit(first)
    platform.submit(second)
    _serve(platform, first, assigned[0][1].instance, now=0)

    platform.shutdown(500)

    assert platform.live_instances() == []
    assert all(node.live == 0 for node in platform.nodes)
    assert engine.pending_count() == 0


def test_node_speeds_depend_only_on_the_seed():
    lognormal = DistributionSpec.lognormal(1.0, 0.25)
    _, a, _ = _platform(seed=9, node_pool_size=50, perf_distribution=lognormal)
    _, b, _ = _platform(seed=9, node_pool_size=50, perf_distribution=lognormal)
    _, c, _ = _platform(seed=10, node_pool_size=50, perf_distribution=lognormal)

    speeds = [node.perf_factor for node in a.nodes]
    assert speeds == [node.perf_factor for node in b.nodes]
    assert speeds != [node.perf_factor for node in c.nodes]
    assert all(s > 0 for s in speeds)


def test_perf_factor_sampling_is_positive():
    import numpy as np

    rng = np.random.default_rng(3)
    spec = DistributionSpec(name="uniform", params={"low": 0.5, "high": 1.5})
    assert all(0.5 <= sample_perf_factor(spec, rng) <= 1.5 for _ in range(100))


def test_reuse_restarts_the_idle_timer():
    engine, platform, assigned = _platform(node_pool_size=1, idle_timeout_ms=60_000)
    first = Invocation(0, 0, 0, 0)
    platform.submit(first)
    instance = assigned[0][1].instance
    _serve(platform, first, instance, now=0)

    engine.run_until(30_000)
    second = Invocation(1, 0, 1, 30_000)
    platform.submit(second)
    assert assigned[-1][1].instance is instance
    _serve(platform, second, instance, now=30_000)

    # the timer armed at t=0 would have fired at 60000
    engine.run_until(89_999)
    assert instance.state is InstanceState.WARM
    engine.run_until(90_000)
    assert instance.state is InstanceState.TERMINATED
    assert instance.terminated_at == 90_000
