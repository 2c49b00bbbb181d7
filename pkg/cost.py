"""
Billing model for the simulated platform.

total = c_exec * (sum d_term + sum d_pass + sum d_reuse)
      + c_inv  * (n_term + n_pass + n_reuse)

Prices are integers in nano-currency, so every total here is exact.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

import config


class AttemptClass(str, Enum):
    TERMINATED = "terminated"  # d_term
    PASSED_COLD_START = "passed_cold_start"  # d_pass
    WARM_REUSE = "warm_reuse"  # d_reuse


class CostParams(BaseModel):
    """Prices for one memory tier. `tier` fills both prices from a preset."""

    model_config = ConfigDict(extra="forbid")

    c_exec_nano: int = Field(
        config.COST_TIER_PRESETS[config.DEFAULT_COST_TIER]["c_exec_nano"],
        gt=0,
        description="Nano-currency per billed millisecond",
    )
    c_inv_nano: int = Field(
        config.COST_TIER_PRESETS[config.DEFAULT_COST_TIER]["c_inv_nano"],
        ge=0,
        description="Nano-currency per invocation attempt",
    )
    memory_tier: str = Field(config.DEFAULT_COST_TIER, description="Tier label")
    memory_mb: int = Field(config.DEFAULT_MEMORY_MB, gt=0, description="Metadata only")
    vcpu: float = Field(config.DEFAULT_VCPU, gt=0, description="Metadata only")

    @model_validator(mode="before")
    @classmethod
    def _expand_tier(cls, data):
        if isinstance(data, dict) and "tier" in data:
            data = dict(data)
            tier = data.pop("tier")
            if tier not in config.COST_TIER_PRESETS:
                supported = ", ".join(sorted(config.COST_TIER_PRESETS))
                raise ValueError(f"unknown cost tier '{tier}'; supported: {supported}")
            for key, value in config.COST_TIER_PRESETS[tier].items():
                data.setdefault(key, value)
            data.setdefault("memory_tier", tier)
        return data

    @classmethod
    def from_tier(cls, tier: str, **overrides) -> "CostParams":
        return cls.model_validate({"tier": tier, **overrides})

    @property
    def invocation_equivalent_ms(self) -> float:
        """How many billed milliseconds one invocation fee is worth."""
        return self.c_inv_nano / self.c_exec_nano


@dataclass(frozen=True)
class AttemptRecord:
    """One attempt of one invocation on one instance, as billed."""

    invocation_id: int
    vu_id: int
    attempt_index: int
    classification: AttemptClass
    instance_id: int
    node_id: int
    perf_factor: float
    judged: str
    retry_count: int
    prepare_ms: int
    benchmark_ms: int
    benchmark_score: Optional[float]
    compute_ms: int
    submitted_at: int
    started_at: int
    ended_at: Optional[int]
    completed_at: Optional[int] = None
    truncated: bool = False

    @property
    def successful(self) -> bool:
        return self.completed_at is not None


def billed_ms(attempt: AttemptRecord) -> int:
    """Billed wall time inside the instance, rounded up to whole milliseconds."""
    if attempt.ended_at is None:
        raise ValueError(f"Attempt {attempt.invocation_id}/{attempt.attempt_index} is still in flight")

    parallel = max(attempt.prepare_ms, attempt.benchmark_ms)
    if attempt.classification is AttemptClass.TERMINATED:
        billed = parallel
    elif attempt.classification is AttemptClass.PASSED_COLD_START:
        billed = parallel + attempt.compute_ms
    else:
        billed = attempt.prepare_ms + attempt.compute_ms
    return int(math.ceil(billed))


def attempt_cost_nano(attempt: AttemptRecord, params: CostParams) -> int:
    return params.c_exec_nano * billed_ms(attempt) + params.c_inv_nano


class CostReport(BaseModel):
    n_term: int = 0
    n_pass: int = 0
    n_reuse: int = 0
    d_term_ms: int = 0
    d_pass_ms: int = 0
    d_reuse_ms: int = 0
    c_exec_nano: int
    c_inv_nano: int
    total_cost_nano: int = 0
    successful: int = 0

    @property
    def total_cost(self) -> float:
        """Total in currency units."""
        return self.total_cost_nano / 1e9

    @property
    def n_attempts(self) -> int:
        return self.n_term + self.n_pass + self.n_reuse


def total_cost(attempts: Iterable[AttemptRecord], params: CostParams) -> CostReport:
    counts: Dict[AttemptClass, int] = {c: 0 for c in AttemptClass}
    durations: Dict[AttemptClass, int] = {c: 0 for c in AttemptClass}
    successful = 0
    for attempt in attempts:
        counts[attempt.classification] += 1
        durations[attempt.classification] += billed_ms(attempt)
        successful += attempt.successful

    billed = sum(durations.values())
    n = sum(counts.values())
    return CostReport(
        n_term=counts[AttemptClass.TERMINATED],
        n_pass=counts[AttemptClass.PASSED_COLD_START],
        n_reuse=counts[AttemptClass.WARM_REUSE],
        d_term_ms=durations[AttemptClass.TERMINATED],
        d_pass_ms=durations[AttemptClass.PASSED_COLD_START],
        d_reuse_ms=durations[AttemptClass.WARM_REUSE],
        c_exec_nano=params.c_exec_nano,
        c_inv_nano=params.c_inv_nano,
        total_cost_nano=params.c_exec_nano * billed + params.c_inv_nano * n,
        successful=successful,
    )


def combine_reports(reports: Sequence[CostReport]) -> CostReport:
    """Sum reports billed at the same prices (several seeds of one arm)."""
    if not reports:
        raise ValueError("nothing to combine")
    prices = {(r.c_exec_nano, r.c_inv_nano) for r in reports}
    if len(prices) != 1:
        raise ValueError("cannot combine reports billed at different prices")
    totals = {
        name: sum(getattr(r, name) for r in reports)
        for name in ("n_term", "n_pass", "n_reuse", "d_term_ms", "d_pass_ms", "d_reuse_ms", "total_cost_nano", "successful")
    }
    return CostReport(c_exec_nano=reports[0].c_exec_nano, c_inv_nano=reports[0].c_inv_nano, **totals)


def cost_per_million_successful(report: CostReport) -> float:
    """Currency per million successful requests; terminated attempts stay in the numerator."""
    if report.successful <= 0:
        raise ValueError("cost per successful request is undefined without successes")
    return float(cost_per_million_series([report.total_cost_nano], [report.successful])[0])


def cost_per_million_series(cumulative_cost_nano: Sequence[float], cumulative_successes: Sequence[float]) -> np.ndarray:
    """Per-sample cost per million successes; inf where nothing has succeeded yet."""
    cost = np.asarray(cumulative_cost_nano, dtype=float)
    successes = np.asarray(cumulative_successes, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(successes > 0, cost / successes * 1e6 / 1e9, np.inf)


@dataclass(frozen=True)
class CostSeries:
    """Cumulative cost and success counts sampled at fixed instants."""

    t_ms: List[int]
    cumulative_cost_nano: List[int]
    cumulative_successes: List[int]


def cost_series(
    attempts: Sequence[AttemptRecord],
    params: CostParams,
    duration_ms: int,
    interval_ms: int = config.SAMPLE_INTERVAL_MS,
) -> CostSeries:
    """Attempts are charged at their end instant, successes at completion."""
    samples = list(range(interval_ms, duration_ms + 1, interval_ms))
    ends = np.array([a.ended_at for a in attempts], dtype=np.int64)
    costs = np.array([attempt_cost_nano(a, params) for a in attempts], dtype=np.int64)
    done = np.sort(np.array([a.completed_at for a in attempts if a.successful], dtype=np.int64))

    order = np.argsort(ends, kind="stable")
    ends, cumulative = ends[order], np.cumsum(costs[order])

    cost_at, success_at = [], []
    for t in samples:
        idx = int(np.searchsorted(ends, t, side="right"))
        cost_at.append(int(cumulative[idx - 1]) if idx else 0)
        success_at.append(int(np.searchsorted(done, t, side="right")))
    return CostSeries(samples, cost_at, success_at)
