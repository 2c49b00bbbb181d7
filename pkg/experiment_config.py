"""
Experiment configuration models.
Every section is a pydantic model with its defaults taken from config.py;
a JSON file and --key value overrides are layered on top.
"""

import hashlib
import json
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

import config
from cost import CostParams

# Required parameters per distribution family
SUPPORTED_DISTRIBUTIONS: Dict[str, Tuple[str, ...]] = {
    "constant": ("value",),
    "exponential": ("mean",),
    "lognormal": ("median", "sigma"),
    "normal": ("mean", "std"),
    "uniform": ("low", "high"),
}

# Families that can only produce strictly positive values
POSITIVE_FAMILIES = ("constant", "lognormal", "uniform")


class ConfigError(ValueError):
    """Raised when a configuration does not validate; carries one message per key."""

    def __init__(self, errors: List[str]):
        self.errors = errors
        super().__init__("; ".join(errors))


class DistributionSpec(BaseModel):
    """A named distribution with its parameters."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = Field(..., description="constant, exponential, lognormal, normal or uniform")
    params: Dict[str, float] = Field(default_factory=dict)

    @field_validator("name")
    @classmethod
    def _known_name(cls, name: str) -> str:
        if name not in SUPPORTED_DISTRIBUTIONS:
            supported = ", ".join(sorted(SUPPORTED_DISTRIBUTIONS))
            raise ValueError(f"unknown distribution '{name}'; supported: {supported}")
        return name

    @model_validator(mode="after")
    def _check_params(self):
        required = SUPPORTED_DISTRIBUTIONS[self.name]
        missing = [p for p in required if p not in self.params]
        extra = [p for p in self.params if p not in required]
        if missing or extra:
            raise ValueError(f"{self.name} takes parameters {list(required)}, got {sorted(self.params)}")
        p = self.params
        if any(not math.isfinite(v) for v in p.values()):
            raise ValueError("distribution parameters must be finite")
        if self.name == "constant" and p["value"] < 0:
            raise ValueError("constant value must be >= 0")
        if self.name == "lognormal" and (p["median"] <= 0 or p["sigma"] < 0):
            raise ValueError("lognormal needs median > 0 and sigma >= 0")
        if self.name == "normal" and p["std"] < 0:
            raise ValueError("normal needs std >= 0")
        if self.name == "uniform" and not (0 <= p["low"] <= p["high"]):
            raise ValueError("uniform needs 0 <= low <= high")
        if self.name == "exponential" and p["mean"] <= 0:
            raise ValueError("exponential needs mean > 0")
        return self

    @classmethod
    def constant(cls, value: float) -> "DistributionSpec":
        return cls(name="constant", params={"value": value})

    @classmethod
    def lognormal(cls, median: float, sigma: float) -> "DistributionSpec":
        return cls(name="lognormal", params={"median": median, "sigma": sigma})

    @property
    def is_constant(self) -> bool:
        return self.name == "constant" or (self.name == "lognormal" and self.params["sigma"] == 0)

    @property
    def strictly_positive(self) -> bool:
        if self.name not in POSITIVE_FAMILIES:
            return False
        if self.name == "constant":
            return self.params["value"] > 0
        if self.name == "uniform":
            return self.params["low"] > 0
        return True

    def sample(self, rng: Optional[np.random.Generator]) -> float:
        p = self.params
        if self.name == "constant":
            return float(p["value"])
        if self.name == "lognormal":
            if p["sigma"] == 0:
                return float(p["median"])
            return float(p["median"] * math.exp(p["sigma"] * rng.standard_normal()))
        if self.name == "normal":
            return max(0.0, float(rng.normal(p["mean"], p["std"])))
        if self.name == "uniform":
            return float(rng.uniform(p["low"], p["high"]))
        return float(rng.exponential(p["mean"]))

    def sample_ms(self, rng: Optional[np.random.Generator], minimum: int = 0) -> int:
        return max(minimum, int(round(self.sample(rng))))


class ThresholdMode(str, Enum):
    FIXED = "fixed"
    PRETEST = "pretest"
    ONLINE = "online"
    WARMUP = "warmup"


class PlatformConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cold_start_delay: DistributionSpec = Field(
        default_factory=lambda: DistributionSpec.constant(config.COLD_START_DELAY_MS)
    )
    idle_timeout_ms: int = Field(config.IDLE_TIMEOUT_MS, gt=0)
    perf_distribution: DistributionSpec = Field(
        default_factory=lambda: DistributionSpec.lognormal(config.PERF_MEDIAN, config.PERF_SIGMA)
    )
    node_pool_size: int = Field(config.NODE_POOL_SIZE, ge=1)
    node_capacity: int = Field(config.NODE_CAPACITY, ge=1)
    warm_reuse: bool = True

    @field_validator("perf_distribution")
    @classmethod
    def _positive_perf(cls, spec: DistributionSpec) -> DistributionSpec:
        if not spec.strictly_positive:
            raise ValueError(
                f"perf factor distribution must be strictly positive; "
                f"use one of {', '.join(POSITIVE_FAMILIES)} with positive parameters"
            )
        return spec


class PolicyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    retry_cap: int = Field(config.RETRY_CAP, ge=1)
    pass_fraction: float = Field(config.PASS_FRACTION, gt=0, le=1)
    benchmark_work: float = Field(1.0, gt=0, description="Multiplier on the function's benchmark_base_ms")
    benchmark_noise_sigma: float = Field(config.BENCHMARK_NOISE_SIGMA, ge=0)
    threshold_mode: ThresholdMode = ThresholdMode.PRETEST
    threshold_ms: Optional[float] = Field(
        None, gt=0, description="Fixed threshold, or the initial one in online mode"
    )
    online_period_ms: int = Field(config.ONLINE_PERIOD_MS, gt=0)
    online_outages: List[Tuple[int, int]] = Field(
        default_factory=list, description="[start, end) windows with ticks suspended"
    )
    warmup_ms: int = Field(
        config.WARMUP_MS, gt=0, description="Observe-only opening of the run before the threshold is calibrated"
    )

    @model_validator(mode="after")
    def _check_mode(self):
        if self.threshold_mode is ThresholdMode.FIXED and self.threshold_ms is None:
            raise ValueError("threshold_ms is required when threshold_mode is 'fixed'")
        if self.threshold_mode is ThresholdMode.ONLINE and self.pass_fraction >= 1:
            raise ValueError("online mode needs pass_fraction < 1 for its quantile estimator")
        for start, end in self.online_outages:
            if start < 0 or end <= start:
                raise ValueError(f"online outage window [{start}, {end}) is empty or negative")
        return self


class WorkloadConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    vu_count: int = Field(config.VU_COUNT, gt=0)
    think_time_ms: int = Field(config.THINK_TIME_MS, gt=0)
    duration_ms: int = Field(config.DURATION_MS, gt=0)
    pretest_vu_count: int = Field(config.PRETEST_VU_COUNT, gt=0)
    pretest_duration_ms: int = Field(config.PRETEST_DURATION_MS, gt=0)
    pretest_cold_only: bool = True


class FunctionProfile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    prepare_ms: DistributionSpec = Field(default_factory=lambda: DistributionSpec.constant(config.PREPARE_MS))
    compute_base_ms: float = Field(config.COMPUTE_BASE_MS, gt=0)
    benchmark_base_ms: float = Field(config.BENCHMARK_BASE_MS, gt=0)

    @field_validator("prepare_ms")
    @classmethod
    def _positive_prepare(cls, spec: DistributionSpec) -> DistributionSpec:
        if spec.name == "constant" and spec.params["value"] <= 0:
            raise ValueError("prepare duration must be > 0")
        return spec


class ReportingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sample_interval_ms: int = Field(config.SAMPLE_INTERVAL_MS, gt=0)
    excel: bool = False


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    platform: PlatformConfig = Field(default_factory=PlatformConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    workload: WorkloadConfig = Field(default_factory=WorkloadConfig)
    function: FunctionProfile = Field(default_factory=FunctionProfile)
    cost: CostParams = Field(default_factory=CostParams)
    reporting: ReportingConfig = Field(default_factory=ReportingConfig)
    seeds: List[int] = Field(default_factory=lambda: [1], min_length=1)
    output_dir: str = config.OUTPUT_DIR
    jobs: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _warmup_fits(self):
        if self.policy.threshold_mode is ThresholdMode.WARMUP and self.policy.warmup_ms >= self.workload.duration_ms:
            raise ValueError("policy.warmup_ms must be shorter than workload.duration_ms")
        return self

    @field_validator("seeds")
    @classmethod
    def _seed_range(cls, seeds: List[int]) -> List[int]:
        for seed in seeds:
            if not 0 <= seed < 2**64:
                raise ValueError(f"seed {seed} is not a 64-bit unsigned value")
        return seeds

    def fingerprint(self) -> str:
        """Hash of everything that must match between the arms of a paired run."""
        shared = self.model_dump(mode="json", include={"platform", "workload", "function", "cost"})
        blob = json.dumps(shared, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def _error_messages(error: ValidationError) -> List[str]:
    messages = []
    for item in error.errors():
        key = ".".join(str(part) for part in item["loc"]) or "<root>"
        messages.append(f"{key}: {item['msg']}")
    return messages


def validate_config(raw: Dict[str, Any]) -> Union[ExperimentConfig, List[str]]:
    """Return a validated config, or the list of errors, each naming its key."""
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        return _error_messages(e)


def default_config_dict() -> Dict[str, Any]:
    return ExperimentConfig().model_dump(mode="json")


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: Dict[str, Any], overrides: Dict[str, str]) -> Dict[str, Any]:
    """Set dotted keys ("policy.retry_cap") on a nested dict; values are parsed as JSON when possible."""
    merged = json.loads(json.dumps(raw))
    for dotted, text in overrides.items():
        parts = dotted.replace("-", "_").split(".")
        node = merged
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError([f"{dotted}: '{part}' is not a section"])
        node[parts[-1]] = _parse_value(text) if isinstance(text, str) else text
    return merged


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    """Load a JSON config (or the defaults), apply overrides, validate."""
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError([f"config file: {e}"]) from e
        except json.JSONDecodeError as e:
            raise ConfigError([f"config file: invalid JSON at line {e.lineno}: {e.msg}"]) from e
        if not isinstance(raw, dict):
            raise ConfigError(["config file: top level must be an object"])
    if overrides:
        raw = apply_overrides(raw, overrides)

    result = validate_config(raw)
    if isinstance(result, list):
        raise ConfigError(result)
    return result
