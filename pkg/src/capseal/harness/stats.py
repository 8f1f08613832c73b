"""Outcome statistics: Wilson score intervals and latency percentiles."""

from __future__ import annotations

import math
from dataclasses import dataclass

WILSON_Z = 1.959964  # two-sided 95%


def wilson_ci(k: int, n: int, z: float = WILSON_Z) -> tuple[float, float]:
    """Wilson score interval for k successes in n trials."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0 <= k <= n:
        raise ValueError("k must be in [0, n]")
    p = k / n
    denom = 1 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = (z / denom) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return max(0.0, center - half), min(1.0, center + half)


def percentile(samples: list[float], p: float) -> float:
    """Linear interpolation between closest ranks; p in [0, 100]."""
    if not samples:
        raise ValueError("no samples")
    if not 0 <= p <= 100:
        raise ValueError("p must be in [0, 100]")
    ordered = sorted(samples)
    if len(ordered) == 1:
        return ordered[0]
    rank = (p / 100.0) * (len(ordered) - 1)
    lo = math.floor(rank)
    hi = math.ceil(rank)
    if lo == hi:
        return ordered[lo]
    frac = rank - lo
    return ordered[lo] * (1 - frac) + ordered[hi] * frac


@dataclass
class StatsSummary:
    n: int
    rate: float | None = None
    wilson_low: float | None = None
    wilson_high: float | None = None
    median_ms: float | None = None
    p95_ms: float | None = None
    mean_ms: float | None = None

    @classmethod
    def from_outcomes(cls, k: int, n: int) -> "StatsSummary":
        low, high = wilson_ci(k, n)
        return cls(n=n, rate=k / n, wilson_low=low, wilson_high=high)

    @classmethod
    def from_latencies(cls, samples_ms: list[float]) -> "StatsSummary":
        return cls(n=len(samples_ms),
                   median_ms=percentile(samples_ms, 50),
                   p95_ms=percentile(samples_ms, 95),
                   mean_ms=sum(samples_ms) / len(samples_ms))

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}
