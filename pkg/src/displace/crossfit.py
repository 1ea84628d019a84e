"""Establishment-clustered folds, leave-fold-out CATE estimation, and the
CATE-derived rankings.

Fold discipline: closing establishments are split into a held-out test set
(for targeting) and k training folds; matched controls always follow the
closing establishment of their treated worker. Each fold's CATEs come from
a forest trained on the other folds only, so no prediction ever uses
outcome data from its own fold. Test-set workers are themselves split into
k groups, each predicted by one of the fold models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ._rng import substream
from .errors import DataError
from .forest import CausalForest, ForestParams, fit_nuisances

__all__ = [
    "TEST_FOLD",
    "FoldAssignment",
    "make_folds",
    "crossfit_cate",
    "rank_quantiles",
    "quantile_bins",
    "group_cates",
]

TEST_FOLD = 0  # fold label of the held-out test set


@dataclass
class FoldAssignment:
    """Maps closing establishments to folds (TEST_FOLD marks the test set)
    and test-set establishments to the fold model that predicts them."""

    n_folds: int
    test_fraction: float
    seed: int
    fold_of_closure: dict[int, int] = field(default_factory=dict)
    predictor_of_test: dict[int, int] = field(default_factory=dict)

    def row_folds(self, data: pd.DataFrame) -> np.ndarray:
        closure = data["event_establishment"]
        missing = ~closure.isin(self.fold_of_closure.keys())
        if missing.any():
            raise DataError(
                f"{int(missing.sum())} rows reference closures outside the fold map"
            )
        return closure.map(self.fold_of_closure).to_numpy(dtype=np.int64)


def make_folds(data: pd.DataFrame, n_folds: int = 5, test_fraction: float = 0.2,
               seed: int = 0) -> FoldAssignment:
    """Assign closing establishments to test set and balanced folds.

    Uniform random split given the seed; fold sizes differ by at most one
    closing establishment. All workers of a closure (and their matched
    controls) share its fold.
    """
    closures = np.sort(data.loc[data["treated"] == 1, "event_establishment"].unique())
    if len(closures) < 2 * n_folds:
        raise DataError(
            f"need at least {2 * n_folds} closing establishments, got {len(closures)}"
        )
    rng = substream(seed, "folds")
    perm = rng.permutation(closures)
    n_test = int(np.floor(test_fraction * len(closures) + 0.5))
    assignment = FoldAssignment(n_folds, test_fraction, seed)
    for i, est in enumerate(perm[:n_test]):
        assignment.fold_of_closure[int(est)] = TEST_FOLD
        assignment.predictor_of_test[int(est)] = 1 + i % n_folds
    for i, est in enumerate(perm[n_test:]):
        assignment.fold_of_closure[int(est)] = 1 + i % n_folds
    return assignment


def crossfit_cate(data: pd.DataFrame, folds: FoldAssignment, params: ForestParams,
                  covariates: list[str], outcome: str = "y_p1",
                  keep_forests: bool = False):
    """Leave-fold-out CATE estimation.

    For every training fold f, nuisances and a causal forest are fitted on
    the other training folds and used to predict fold-f rows (and the test
    rows assigned to model f). Returns a per-worker table with cate,
    cross-fitted nuisances and residuals; optionally the fold forests.
    """
    fold_of_row = folds.row_folds(data)
    X = data[covariates].to_numpy(dtype=np.float64)
    y = data[outcome].to_numpy(dtype=np.float64)
    w = data["treated"].to_numpy(dtype=np.float64)
    clusters = data["establishment_id"].to_numpy()
    keys = data["worker_id"].to_numpy()
    test_pred = data["event_establishment"].map(
        lambda e: folds.predictor_of_test.get(int(e), -1)
    ).to_numpy()

    out = pd.DataFrame({
        "worker_id": keys,
        "fold": fold_of_row,
        "cate": np.nan,
        "e_hat": np.nan,
        "m_hat": np.nan,
    })
    forests: dict[int, CausalForest] = {}

    for f in range(1, folds.n_folds + 1):
        train = (fold_of_row != f) & (fold_of_row != TEST_FOLD)
        if not train.any():
            raise DataError(f"fold {f}: empty training set")
        try:
            nus = fit_nuisances(
                X[train], y[train], w[train], clusters[train],
                _fold_params(params, f, "nuisance"), covariates, row_key=keys[train],
            )
            forest = CausalForest.fit(
                X[train], nus, clusters[train],
                _fold_params(params, f, "causal"), covariates, row_key=keys[train],
            )
        except DataError as err:
            raise DataError(f"fold {f}: {err}") from err
        forest.propensity_model = nus.propensity_model
        forest.outcome_model = nus.outcome_model
        target = (fold_of_row == f) | ((fold_of_row == TEST_FOLD) & (test_pred == f))
        idx = np.flatnonzero(target)
        if len(idx):
            Xq = X[idx]
            out.loc[idx, "cate"] = forest.predict(Xq)
            out.loc[idx, "e_hat"] = np.clip(
                nus.propensity_model.predict(Xq), 0.01, 0.99
            )
            out.loc[idx, "m_hat"] = nus.outcome_model.predict(Xq)
        if keep_forests:
            forests[f] = forest
    out["w_res"] = w - out["e_hat"]
    out["y_res"] = y - out["m_hat"]
    return (out, forests) if keep_forests else (out, None)


def _fold_params(params: ForestParams, fold: int, role: str) -> ForestParams:
    from ._rng import substream_seed

    child = ForestParams(**{**params.__dict__})
    child.seed = substream_seed(params.seed, f"fold/{fold}/{role}")
    return child


def quantile_bins(values: np.ndarray, ids: np.ndarray, q: int) -> np.ndarray:
    """Balanced ascending bins 1..q; ties broken by id. Bin sizes differ by
    at most one."""
    n = len(values)
    order = np.lexsort((ids, values))
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(n)
    return (ranks * q) // n + 1


def rank_quantiles(table: pd.DataFrame, q: int, column: str = "cate",
                   by_fold: bool = True, out_column: str | None = None) -> pd.DataFrame:
    """Within-fold quantile groups of a score column (1 = most negative)."""
    name = out_column or {10: "decile", 4: "quartile", 20: "ventile"}.get(q, f"q{q}")
    table = table.copy()
    table[name] = 0
    groups = table.groupby("fold").groups if by_fold else {"all": table.index}
    for _, idx in groups.items():
        sub = table.loc[idx]
        ok = sub[column].notna()
        if ok.any():
            bins = quantile_bins(
                sub.loc[ok, column].to_numpy(), sub.loc[ok, "worker_id"].to_numpy(), q
            )
            table.loc[sub.index[ok], name] = bins
    return table


def group_cates(table: pd.DataFrame, data: pd.DataFrame) -> pd.DataFrame:
    """Coworker and market CATE aggregates.

    coworker_cate: leave-one-out mean CATE over displaced coworkers of the
    same closure (missing for single-worker events). market_cate: mean CATE
    over displaced workers of *other* events in the same industry-location
    market (missing in single-event markets). Within-event ranks are
    computed among the event's displaced workers. Controls inherit every
    event-level value from the treated worker they were matched to.
    """
    cols = ["worker_id", "event_establishment", "industry_id", "location_id",
            "treated", "match_id"]
    merged = table.merge(data[cols], on="worker_id", how="left", validate="1:1")
    displaced = merged[merged["treated"] == 1]

    ev = displaced.groupby("event_establishment")["cate"].agg(["sum", "count"])
    ev_info = displaced.drop_duplicates("event_establishment").set_index(
        "event_establishment"
    )[["industry_id", "location_id"]]
    ev = ev.join(ev_info)

    d = displaced.set_index("worker_id")
    ev_sum = d["event_establishment"].map(ev["sum"])
    ev_n = d["event_establishment"].map(ev["count"])
    coworker = (ev_sum - d["cate"]) / (ev_n - 1)
    coworker[ev_n < 2] = np.nan

    market = ev.groupby(["industry_id", "location_id"])[["sum", "count"]].sum()
    market.columns = ["mkt_sum", "mkt_n"]
    mk = ev.join(market, on=["industry_id", "location_id"])
    mkt_sum = d["event_establishment"].map(mk["mkt_sum"])
    mkt_n = d["event_establishment"].map(mk["mkt_n"])
    market_cate = (mkt_sum - ev_sum) / (mkt_n - ev_n)
    market_cate[mkt_n <= ev_n] = np.nan

    within_rank = pd.Series(0, index=d.index, dtype=np.int64)
    within_decile = pd.Series(0, index=d.index, dtype=np.int64)
    for _, idx in displaced.groupby("event_establishment").groups.items():
        sub = displaced.loc[idx]
        vals = sub["cate"].to_numpy()
        ids = sub["worker_id"].to_numpy()
        order = np.lexsort((ids, vals))
        r = np.empty(len(vals), dtype=np.int64)
        r[order] = np.arange(1, len(vals) + 1)
        within_rank.loc[ids] = r
        within_decile.loc[ids] = quantile_bins(vals, ids, 10)

    per_treated = pd.DataFrame({
        "coworker_cate": coworker,
        "market_cate": market_cate,
        "within_event_rank": within_rank,
        "within_event_decile": within_decile,
        "event_size": ev_n,
    })
    # controls inherit from the treated worker they were matched to
    out = table.copy()
    carrier = merged["match_id"]
    for col in per_treated.columns:
        out[col] = carrier.map(per_treated[col]).to_numpy()
    return out
