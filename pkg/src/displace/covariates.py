"""Covariate derivation formulas and the covariate taxonomy.

These are the scalar building blocks used by the ingestion pass; each one
is also exposed directly so the tabulated conformance checks can exercise
them in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError

__all__ = [
    "CovariateSpec",
    "growth_metric",
    "churn_rate",
    "reallocation_rate",
    "establishment_wage_premium",
    "hhi",
    "shift_share_exposure",
]

LEVELS = ("worker", "family", "human-capital", "job", "industry", "location", "aggregate")


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: str  # continuous | dummy
    level: str

    def __post_init__(self):
        if self.kind not in ("continuous", "dummy"):
            raise DataError(f"unknown covariate kind {self.kind!r}")
        if self.level not in LEVELS:
            raise DataError(f"unknown covariate level {self.level!r}")


def growth_metric(emp_a: float, emp_b: float) -> float:
    """Bounded growth rate (emp_b - emp_a) / mean(emp_a, emp_b).

    Equals 2 when activity appears from nothing and -2 when it disappears,
    which bounds extreme changes in small cells. Used for long-run industry
    trends, the industry business cycle, and plant-size-trend analogs.
    """
    if emp_a < 0 or emp_b < 0:
        raise DataError("employment counts must be nonnegative")
    if emp_a == 0 and emp_b == 0:
        raise DataError("growth metric undefined when both counts are zero")
    return (emp_b - emp_a) / ((emp_a + emp_b) / 2.0)


def churn_rate(hires: float, separations: float, emp_t: float, emp_prev: float) -> float:
    """Worker flows in excess of the net employment change, scaled by
    average employment over the two years."""
    denom = (emp_t + emp_prev) / 2.0
    if denom <= 0:
        raise DataError("churn rate undefined for zero average employment")
    return ((hires + separations) - abs(emp_t - emp_prev)) / denom


def reallocation_rate(job_creation: float, job_destruction: float,
                      emp_t: float, emp_prev: float) -> float:
    """Job creation plus destruction in excess of the net change, scaled by
    average employment over the two years."""
    denom = (emp_t + emp_prev) / 2.0
    if denom <= 0:
        raise DataError("reallocation rate undefined for zero average employment")
    return ((job_creation + job_destruction) - abs(emp_t - emp_prev)) / denom


def establishment_wage_premium(coworker_residual_earnings: Sequence[float],
                               self_index: int) -> float:
    """Leave-one-out mean of coworkers' residual log earnings.

    Returns NaN for singleton establishments; the ingestion pass imputes
    those downstream.
    """
    values = np.asarray(coworker_residual_earnings, dtype=float)
    if not 0 <= self_index < len(values):
        raise DataError("self_index out of range")
    if len(values) < 2:
        return float("nan")
    mask = np.ones(len(values), dtype=bool)
    mask[self_index] = False
    return float(values[mask].mean())


def hhi(industry_employment_shares: Sequence[float]) -> float:
    """Concentration as the sum of squared employment shares."""
    shares = np.asarray(industry_employment_shares, dtype=float)
    if abs(shares.sum() - 1.0) > 1e-9:
        raise DataError(f"shares must sum to 1, got {shares.sum()!r}")
    return float(np.sum(shares * shares))


def shift_share_exposure(local_shares: Mapping[str, float],
                         industry_values: Mapping[str, float]) -> float:
    """Local exposure to an industry characteristic: share-weighted sum."""
    total = sum(local_shares.values())
    if abs(total - 1.0) > 1e-9:
        raise DataError(f"local shares must sum to 1, got {total!r}")
    missing = set(local_shares) - set(industry_values)
    if missing:
        raise DataError(f"industry values missing for {sorted(missing)}")
    return float(sum(share * industry_values[s] for s, share in local_shares.items()))
