"""Partial market-effect decomposition by covariate-block rotation.

The covariates split into location, industry, and worker/job blocks.
Rotating one block through all values observed in the same year while
holding the others at their empirical values isolates that block's
predictive contribution:

  location effect of l  = mean over workers of CATE(location := l, rest)
  industry effect of s  = mean over workers of CATE(industry := s, rest)
  worker effect of i    = mean over observed (location, industry) pairs
                          of CATE(market := pair, worker := i)

Years are rotated separately and pooled with worker-count weights. The
worker rotation caps the market grid (seeded subsample, flagged) to stay
tractable. These decompositions are descriptive summaries of the fitted
effect surface, not causal claims about places or industries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ._rng import substream
from .errors import ConfigError, DataError
from .crossfit import quantile_bins
from .evaluate import cluster_ols

__all__ = [
    "CovariatePartition",
    "partial_location_effects",
    "partial_industry_effects",
    "partial_worker_effects",
    "attach_partial_effects",
    "quartile_cross_tabs",
    "characteristics_by_quartile",
]


@dataclass
class CovariatePartition:
    """Total, disjoint assignment of covariates to rotation blocks."""

    location: list[str]
    industry: list[str]
    worker: list[str]

    def validate(self, covariates: list[str]) -> None:
        blocks = [self.location, self.industry, self.worker]
        combined: list[str] = sum(blocks, [])
        if len(set(combined)) != len(combined):
            raise ConfigError("partition blocks overlap")
        if set(combined) != set(covariates):
            missing = set(covariates) - set(combined)
            extra = set(combined) - set(covariates)
            raise ConfigError(
                f"partition must cover covariates exactly; missing {sorted(missing)}, "
                f"unknown {sorted(extra)}"
            )

    @classmethod
    def from_blocks(cls, blocks: dict[str, str], covariates: list[str]) -> "CovariatePartition":
        part = cls(
            location=[c for c in covariates if blocks.get(c) == "location"],
            industry=[c for c in covariates if blocks.get(c) == "industry"],
            worker=[c for c in covariates if blocks.get(c) not in ("location", "industry")],
        )
        part.validate(covariates)
        return part

    def to_dict(self) -> dict:
        return {"location": self.location, "industry": self.industry, "worker": self.worker}


def _block_vectors(data: pd.DataFrame, unit_col: str, cols: list[str]) -> pd.DataFrame:
    """One covariate vector per unit; verifies within-unit constancy."""
    grouped = data.groupby(unit_col)[cols]
    if (grouped.nunique() > 1).any().any():
        raise DataError(f"{unit_col}: block covariates vary within unit")
    return grouped.first()


def _rotate_block(forest, X: np.ndarray, col_idx: list[int], vector: np.ndarray) -> np.ndarray:
    Xq = X.copy()
    Xq[:, col_idx] = vector
    return forest.predict(Xq)


def _partial_unit_effects(forest, data: pd.DataFrame, covariates: list[str],
                          block_cols: list[str], unit_col: str) -> pd.DataFrame:
    col_idx = [covariates.index(c) for c in block_cols]
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    skipped: dict[int, int] = {}
    for year, rows in data.groupby("event_year"):
        X = rows[covariates].to_numpy(dtype=np.float64)
        vectors = _block_vectors(rows, unit_col, block_cols)
        for unit, vec in vectors.iterrows():
            preds = _rotate_block(forest, X, col_idx, vec.to_numpy(dtype=float))
            sums[unit] = sums.get(unit, 0.0) + preds.sum()
            counts[unit] = counts.get(unit, 0) + len(preds)
    all_units = np.sort(data[unit_col].unique())
    out = pd.DataFrame({
        unit_col: all_units,
        "partial_effect": [
            sums[u] / counts[u] if counts.get(u) else np.nan for u in all_units
        ],
        "n_rotations": [counts.get(u, 0) for u in all_units],
    })
    out["skipped_years"] = [
        data["event_year"].nunique()
        - data.loc[data[unit_col] == u, "event_year"].nunique()
        for u in all_units
    ]
    return out


def partial_location_effects(forest, data: pd.DataFrame, partition: CovariatePartition,
                             covariates: list[str]) -> pd.DataFrame:
    """Average CATE had every worker faced each location's conditions.

    Rotations stay within the same year; years are pooled weighted by
    worker counts. Locations absent from a year skip it (flagged via
    skipped_years).
    """
    partition.validate(covariates)
    return _partial_unit_effects(forest, data, covariates, partition.location,
                                 "location_id")


def partial_industry_effects(forest, data: pd.DataFrame, partition: CovariatePartition,
                             covariates: list[str]) -> pd.DataFrame:
    """Average CATE had every worker faced each industry's conditions."""
    partition.validate(covariates)
    return _partial_unit_effects(forest, data, covariates, partition.industry,
                                 "industry_id")


def partial_worker_effects(forest, data: pd.DataFrame, partition: CovariatePartition,
                           covariates: list[str], grid_cap: int = 200,
                           seed: int = 0) -> pd.DataFrame:
    """Average CATE of each worker over the observed market grid.

    The grid is the set of (location, industry) pairs observed in the same
    year; when it exceeds grid_cap a seeded subsample is used and flagged.
    """
    partition.validate(covariates)
    market_cols = partition.location + partition.industry
    col_idx = [covariates.index(c) for c in market_cols]
    pieces = []
    for year, rows in data.groupby("event_year"):
        X = rows[covariates].to_numpy(dtype=np.float64)
        combos = rows.drop_duplicates(["location_id", "industry_id"])
        vectors = combos[market_cols].to_numpy(dtype=float)
        capped = len(vectors) > grid_cap
        if capped:
            rng = substream(seed, f"partials/worker/{year}")
            keep = np.sort(rng.choice(len(vectors), size=grid_cap, replace=False))
            vectors = vectors[keep]
        acc = np.zeros(len(rows))
        for vec in vectors:
            acc += _rotate_block(forest, X, col_idx, vec)
        pieces.append(pd.DataFrame({
            "worker_id": rows["worker_id"].to_numpy(),
            "partial_effect": acc / len(vectors),
            "n_grid": len(vectors),
            "grid_capped": capped,
        }))
    return pd.concat(pieces, ignore_index=True).sort_values("worker_id").reset_index(drop=True)


def attach_partial_effects(data: pd.DataFrame, tau_location: pd.DataFrame,
                           tau_industry: pd.DataFrame,
                           tau_worker: pd.DataFrame) -> pd.DataFrame:
    """Per-worker partial-effect columns plus worker-weighted quartiles.

    Quartiles are assigned over displaced workers; matched controls inherit
    their treated worker's groups. The market band combines the location
    and industry effects additively; median bands are the 3rd and 4th
    quintiles.
    """
    out = data.copy()
    out["tau_location"] = out["location_id"].map(
        tau_location.set_index("location_id")["partial_effect"]
    )
    out["tau_industry"] = out["industry_id"].map(
        tau_industry.set_index("industry_id")["partial_effect"]
    )
    out["tau_worker"] = out["worker_id"].map(
        tau_worker.set_index("worker_id")["partial_effect"]
    )
    out["tau_market"] = out["tau_location"] + out["tau_industry"]

    treated = out[out["treated"] == 1]
    inherit = {}
    for col, q in (("tau_worker", 4), ("tau_location", 4), ("tau_industry", 4)):
        bins = quantile_bins(treated[col].to_numpy(), treated["worker_id"].to_numpy(), q)
        inherit[f"{col}_quartile"] = pd.Series(bins, index=treated["worker_id"])
    for col in ("tau_worker", "tau_market"):
        quint = quantile_bins(treated[col].to_numpy(), treated["worker_id"].to_numpy(), 5)
        inherit[f"{col}_quintile"] = pd.Series(quint, index=treated["worker_id"])
    mk = quantile_bins(treated["tau_market"].to_numpy(), treated["worker_id"].to_numpy(), 4)
    inherit["tau_market_quartile"] = pd.Series(mk, index=treated["worker_id"])

    for name, series in inherit.items():
        out[name] = out["match_id"].map(series)
    return out


def _ate_with_diff(data: pd.DataFrame, mask_worst, mask_best, outcome: str,
                   cluster_col: str) -> dict:
    """ATEs in two cells and their difference with a clustered SE (single
    regression with a cell interaction)."""
    sub = data[mask_worst | mask_best].copy()
    sub = sub[sub[outcome].notna()]
    best = mask_best[sub.index].to_numpy().astype(float)
    w = sub["treated"].to_numpy(dtype=float)
    X = np.column_stack([np.ones(len(sub)), w, best, w * best])
    beta, se = cluster_ols(X, sub[outcome].to_numpy(dtype=float),
                           sub[cluster_col].to_numpy(),
                           row_key=sub["worker_id"].to_numpy())
    return {
        "worst": float(beta[1]),
        "best": float(beta[1] + beta[3]),
        "difference": float(-beta[3]),  # worst minus best
        "se_difference": float(se[3]),
    }


def quartile_cross_tabs(data: pd.DataFrame, outcome_map: dict[str, str] | None = None
                        ) -> pd.DataFrame:
    """Effect tables by partial-effect quartile intersections.

    Earnings panels: worker quartiles within market bands (clustered on
    establishment), location quartiles within worker bands (clustered on
    location), industry quartiles within worker bands (clustered on
    industry). Mobility panels repeat the location/industry cuts for the
    move outcomes. data must already carry the attach_partial_effects
    columns.
    """
    outcome_map = outcome_map or {
        "earnings": "y_p1",
        "location_move": "location_move_p3",
        "industry_move": "industry_move_p3",
    }
    need = {"tau_worker_quartile", "tau_location_quartile", "tau_industry_quartile",
            "tau_market_quintile", "tau_worker_quintile"}
    if not need <= set(data.columns):
        raise DataError("run attach_partial_effects first")

    wq = data["tau_worker_quartile"]
    rows = []

    def worker_band_masks():
        yield "all worker types", pd.Series(True, index=data.index)
        yield "worst worker quartile", wq == 1
        yield "median workers", data["tau_worker_quintile"].isin((3, 4))
        yield "best worker quartile", wq == 4

    # Panel A: worker quartiles, by market band
    mq = data["tau_market_quartile"]
    bands = [
        ("all market types", pd.Series(True, index=data.index)),
        ("worst market quartile", mq == 1),
        ("median markets", data["tau_market_quintile"].isin((3, 4))),
        ("best market quartile", mq == 4),
    ]
    for label, band in bands:
        cells = _ate_with_diff(
            data[band], (wq == 1)[band], (wq == 4)[band],
            outcome_map["earnings"], "establishment_id",
        )
        rows.append({"panel": "A:worker_quartiles", "row": label, **cells})

    # Panels B/C: location and industry quartiles by worker band
    for panel, qcol, cluster in (
        ("B:location_quartiles", "tau_location_quartile", "location_id"),
        ("C:industry_quartiles", "tau_industry_quartile", "industry_id"),
    ):
        q = data[qcol]
        for label, band in worker_band_masks():
            cells = _ate_with_diff(
                data[band], (q == 1)[band], (q == 4)[band],
                outcome_map["earnings"], cluster,
            )
            rows.append({"panel": panel, "row": label, **cells})

    # Panels D/E: mobility outcomes
    for panel, qcol, cluster, outcome in (
        ("D:location_mobility", "tau_location_quartile", "location_id",
         outcome_map["location_move"]),
        ("E:industry_mobility", "tau_industry_quartile", "industry_id",
         outcome_map["industry_move"]),
    ):
        q = data[qcol]
        for label, band in worker_band_masks():
            cells = _ate_with_diff(
                data[band], (q == 1)[band], (q == 4)[band], outcome, cluster,
            )
            rows.append({"panel": panel, "row": label, **cells})
    return pd.DataFrame(rows)


def characteristics_by_quartile(data: pd.DataFrame, quartile_col: str,
                                characteristics: list[str],
                                cluster_col: str) -> pd.DataFrame:
    """Mean characteristics in the worst and best quartiles with the
    difference and its clustered SE."""
    rows = []
    worst = data[data[quartile_col] == 1]
    best = data[data[quartile_col] == 4]
    both = data[data[quartile_col].isin((1, 4))]
    for name in characteristics:
        d_best = (both[quartile_col] == 4).to_numpy(dtype=float)
        X = np.column_stack([np.ones(len(both)), d_best])
        beta, se = cluster_ols(X, both[name].to_numpy(dtype=float),
                               both[cluster_col].to_numpy(),
                               row_key=both["worker_id"].to_numpy())
        rows.append({
            "characteristic": name,
            "worst_quartile": float(worst[name].mean()),
            "best_quartile": float(best[name].mean()),
            "difference": float(-beta[1]),
            "se_difference": float(se[1]),
        })
    return pd.DataFrame(rows)
