import hypothesis
import numpy as np
import pytest

from experiment_config import ExperimentConfig, apply_overrides

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)

# A minute of virtual time on a small node pool; every run finishes in well under a second.
SMALL = {
    "platform": {"node_pool_size": 50, "node_capacity": 4},
    "workload": {
        "vu_count": 4,
        "duration_ms": 60_000,
        "pretest_vu_count": 4,
        "pretest_duration_ms": 20_000,
    },
    "seeds": [3],
}


@pytest.fixture
def make_config():
    """Small experiment config with dotted-key overrides on top."""

    def _make(**overrides) -> ExperimentConfig:
        raw = apply_overrides(SMALL, {k.replace("__", "."): v for k, v in overrides.items()})
        return ExperimentConfig.model_validate(raw)

    return _make


@pytest.fixture
def small_config(make_config) -> ExperimentConfig:
    return make_config()


@pytest.fixture
def closed_form_config(make_config) -> ExperimentConfig:
    """One VU, no variability, 2400 ms service time and 600 ms think time over 30 minutes."""
    return make_config(
        workload__vu_count=1,
        workload__think_time_ms=600,
        workload__duration_ms=1_800_000,
        platform__cold_start_delay={"name": "constant", "params": {"value": 0}},
        platform__perf_distribution={"name": "constant", "params": {"value": 1.0}},
        function__prepare_ms={"name": "constant", "params": {"value": 400}},
        function__compute_base_ms=2000.0,
        policy__enabled=False,
    )
