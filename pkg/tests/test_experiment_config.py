import json

import numpy as np
import pytest

from experiment_config import (
    ConfigError,
    DistributionSpec,
    ExperimentConfig,
    ThresholdMode,
    apply_overrides,
    default_config_dict,
    load_config,
    validate_config,
)


def _errors(raw):
    result = validate_config(raw)
    assert isinstance(result, list), "expected validation errors"
    return result


def test_defaults_validate():
    experiment = validate_config({})
    assert isinstance(experiment, ExperimentConfig)
    assert experiment.policy.pass_fraction == 0.4
    assert experiment.policy.retry_cap == 5
    assert experiment.workload.duration_ms == 1_800_000
    assert experiment.policy.threshold_mode is ThresholdMode.PRETEST


def test_default_dump_round_trips_through_validation():
    assert validate_config(default_config_dict()) == ExperimentConfig()


def test_retry_cap_zero_names_the_key():
    errors = _errors({"policy": {"retry_cap": 0}})
    assert any(e.startswith("policy.retry_cap:") for e in errors)


def test_pass_fraction_forty_percent_is_accepted():
    assert isinstance(validate_config({"policy": {"pass_fraction": 0.4}}), ExperimentConfig)


def test_unknown_distribution_lists_supported_names():
    errors = _errors({"platform": {"perf_distribution": {"name": "pareto", "params": {}}}})
    assert any(
        e.startswith("platform.perf_distribution.name:")
        and "supported: constant, exponential, lognormal, normal, uniform" in e
        for e in errors
    )


@pytest.mark.parametrize(
    "spec",
    [
        {"name": "normal", "params": {"mean": 1.0, "std": 0.1}},
        {"name": "uniform", "params": {"low": 0.0, "high": 2.0}},
        {"name": "constant", "params": {"value": 0.0}},
    ],
)
def test_perf_distribution_must_be_strictly_positive(spec):
    errors = _errors({"platform": {"perf_distribution": spec}})
    assert any(e.startswith("platform.perf_distribution:") for e in errors)


@pytest.mark.parametrize(
    "raw, key",
    [
        ({"platform": {"cold_start_delay": {"name": "lognormal", "params": {"median": 1.0}}}}, "platform.cold_start_delay"),
        ({"workload": {"vu_count": -1}}, "workload.vu_count"),
        ({"platform": {"bogus": 1}}, "platform.bogus"),
        ({"policy": {"threshold_mode": "fixed"}}, "policy"),
        ({"seeds": []}, "seeds"),
        ({"seeds": [-3]}, "seeds"),
        ({"function": {"prepare_ms": {"name": "constant", "params": {"value": 0}}}}, "function.prepare_ms"),
    ],
)
def test_invalid_values_are_reported_by_key(raw, key):
    errors = _errors(raw)
    assert any(e.split(":")[0] == key for e in errors), errors


def test_overrides_use_dotted_keys_and_parse_json():
    raw = apply_overrides({"policy": {"retry_cap": 5}}, {"policy.retry-cap": "3", "output_dir": "results", "seeds": "[1, 2]"})
    assert raw == {"policy": {"retry_cap": 3}, "output_dir": "results", "seeds": [1, 2]}


def test_override_into_a_value_is_rejected():
    with pytest.raises(ConfigError):
        apply_overrides({"jobs": 1}, {"jobs.count": "2"})


def test_load_config_layers_file_and_overrides(tmp_path):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps({"workload": {"vu_count": 3, "think_time_ms": 500}}))

    experiment = load_config(path, {"workload.vu_count": "5"})

    assert experiment.workload.vu_count == 5
    assert experiment.workload.think_time_ms == 500


def test_load_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    with pytest.raises(ConfigError) as excinfo:
        load_config(None, {"policy.retry_cap": "0"})
    assert excinfo.value.errors[0].startswith("policy.retry_cap:")


def test_fingerprint_ignores_policy_but_not_platform():
    base = ExperimentConfig()
    assert base.fingerprint() == ExperimentConfig(policy={"retry_cap": 3}).fingerprint()
    assert base.fingerprint() != ExperimentConfig(platform={"node_pool_size": 10}).fingerprint()


def test_cost_tier_shorthand():
    experiment = ExperimentConfig.model_validate({"cost": {"tier": "large"}})
    assert experiment.cost.c_exec_nano == 400
    assert experiment.cost.memory_tier == "large"


class TestDistributionSpec:
    def test_constant_needs_no_generator(self):
        assert DistributionSpec.constant(400).sample_ms(None) == 400
        assert DistributionSpec.lognormal(1.5, 0.0).sample(None) == 1.5
        assert DistributionSpec.lognormal(1.5, 0.0).is_constant

    def test_normal_is_truncated_at_zero(self):
        spec = DistributionSpec(name="normal", params={"mean": -10.0, "std": 1.0})
        rng = np.random.default_rng(0)
        assert all(spec.sample(rng) == 0.0 for _ in range(20))

    def test_uniform_stays_in_range(self):
        spec = DistributionSpec(name="uniform", params={"low": 2.0, "high": 3.0})
        rng = np.random.default_rng(0)
        draws = [spec.sample(rng) for _ in range(200)]
        assert min(draws) >= 2.0 and max(draws) <= 3.0

    def test_sample_ms_respects_minimum(self):
        assert DistributionSpec.constant(0).sample_ms(None, minimum=1) == 1

    def test_lognormal_median(self):
        spec = DistributionSpec.lognormal(1.0, 0.25)
        rng = np.random.default_rng(11)
        assert np.median([spec.sample(rng) for _ in range(4000)]) == pytest.approx(1.0, abs=0.03)
