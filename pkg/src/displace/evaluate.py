"""Estimator evaluation: group ATEs with establishment-clustered standard
errors, doubly robust scores, best-linear-predictor calibration,
rank-weighted targeting metrics, event-time trajectories, one-by-one
interaction regressions, quantile profiling, and the insurance degree.

Sign conventions: losses are negative throughout. Prioritization scores
order workers ascending (most negative first), so good targeting of
losses produces *negative* Qini/AUTOC values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ._rng import substream
from .errors import DataError

__all__ = [
    "GroupEstimate",
    "CalibrationResult",
    "RateResult",
    "cluster_ols",
    "group_ate",
    "aipw_score",
    "blp_calibration",
    "rate_qini",
    "event_time_ate",
    "interaction_regressions",
    "profile_quantiles",
    "within_cell_quartiles",
    "insurance_degree",
    "outcome_distribution",
]

TOC_GRID = np.round(np.arange(1, 51) * 0.02, 10)


def _canonical(data: pd.DataFrame) -> pd.DataFrame:
    return data.sort_values("worker_id", kind="stable")


def cluster_ols(X: np.ndarray, y: np.ndarray, clusters: np.ndarray,
                row_key: np.ndarray | None = None, cr1: bool = False):
    """OLS with cluster-robust (CR0) covariance.

    Rows are re-ordered by row_key before any accumulation so the result
    is exactly invariant to the input row order. Returns (beta, se).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    clusters = np.asarray(clusters)
    if row_key is not None:
        order = np.argsort(np.asarray(row_key), kind="stable")
        X, y, clusters = X[order], y[order], clusters[order]
    n, k = X.shape
    xtx = X.T @ X
    beta = np.linalg.solve(xtx, X.T @ y)
    resid = y - X @ beta
    uniq, codes = np.unique(clusters, return_inverse=True)
    g = len(uniq)
    scores = np.zeros((g, k))
    for j in range(k):
        scores[:, j] = np.bincount(codes, weights=X[:, j] * resid, minlength=g)
    meat = scores.T @ scores
    bread = np.linalg.inv(xtx)
    cov = bread @ meat @ bread
    if cr1:
        if g > 1 and n > k:
            cov = cov * (g / (g - 1)) * ((n - 1) / (n - k))
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return beta, se


@dataclass
class GroupEstimate:
    group: object
    ate: float
    se_clustered: float
    n_treated: int
    n_control: int
    aipw_mean: float = float("nan")
    aipw_se: float = float("nan")


def group_ate(data: pd.DataFrame, groups, outcome: str = "y_p1",
              dr_scores: np.ndarray | None = None, cr1: bool = False) -> list[GroupEstimate]:
    """Treated-minus-control mean difference per group with SEs clustered
    on the pre-displacement establishment.

    Groups must contain both arms; the optional doubly robust scores are
    averaged per group with their own clustered SE.
    """
    data = data.copy()
    data["_group"] = np.asarray(groups)
    if dr_scores is not None:
        data["_dr"] = np.asarray(dr_scores)
    out: list[GroupEstimate] = []
    for label, sub in data.groupby("_group", dropna=True, sort=True):
        sub = _canonical(sub)
        ok = sub[outcome].notna()
        sub = sub[ok]
        w = sub["treated"].to_numpy(dtype=float)
        nt, nc = int(w.sum()), int((1 - w).sum())
        if nt == 0 or nc == 0:
            raise DataError(f"group {label!r} lacks treated or control workers")
        X = np.column_stack([np.ones(len(sub)), w])
        beta, se = cluster_ols(
            X, sub[outcome].to_numpy(dtype=float),
            sub["establishment_id"].to_numpy(),
            row_key=sub["worker_id"].to_numpy(), cr1=cr1,
        )
        est = GroupEstimate(label, float(beta[1]), float(se[1]), nt, nc)
        if dr_scores is not None:
            dr = sub["_dr"].to_numpy(dtype=float)
            b, s = cluster_ols(
                np.ones((len(sub), 1)), dr, sub["establishment_id"].to_numpy(),
                row_key=sub["worker_id"].to_numpy(), cr1=cr1,
            )
            est.aipw_mean, est.aipw_se = float(b[0]), float(s[0])
        out.append(est)
    return out


def aipw_score(y, w, e_hat, m_hat, tau_hat) -> np.ndarray:
    """Augmented inverse-probability-weighted score whose mean is a doubly
    robust ATE estimate. Propensities must already be clipped away from
    0 and 1."""
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    e = np.asarray(e_hat, dtype=float)
    m = np.asarray(m_hat, dtype=float)
    tau = np.asarray(tau_hat, dtype=float)
    if np.any(e <= 0) or np.any(e >= 1):
        raise DataError("propensities must lie strictly inside (0,1)")
    resid = y - m - (w - e) * tau
    return tau + (w - e) / (e * (1.0 - e)) * resid


@dataclass
class CalibrationResult:
    alpha: float
    beta: float
    alpha_se: float
    beta_se: float
    mean_tau: float
    degenerate: bool = False


def blp_calibration(w_res, y_res, tau_hat, clusters, row_key=None) -> CalibrationResult:
    """Best-linear-predictor calibration on the residualized scale.

    Regresses the residualized outcome jointly on A = w_res * mean(tau)
    and B = w_res * (tau - mean(tau)) with no intercept. alpha near one
    means the mean effect level is right; beta near one means the
    variation across predictions is right. Standard errors are clustered.
    """
    w_res = np.asarray(w_res, dtype=float)
    y_res = np.asarray(y_res, dtype=float)
    tau = np.asarray(tau_hat, dtype=float)
    mean_tau = float(tau.mean())
    A = w_res * mean_tau
    B = w_res * (tau - mean_tau)
    if np.allclose(B, 0.0):
        X = A[:, None]
        beta, se = cluster_ols(X, y_res, clusters, row_key=row_key)
        return CalibrationResult(float(beta[0]), float("nan"), float(se[0]),
                                 float("nan"), mean_tau, degenerate=True)
    X = np.column_stack([A, B])
    beta, se = cluster_ols(X, y_res, clusters, row_key=row_key)
    return CalibrationResult(float(beta[0]), float(beta[1]), float(se[0]),
                             float(se[1]), mean_tau)


@dataclass
class RateResult:
    qini: float
    autoc: float
    se: float
    weighting: str
    toc_curve: list[tuple[float, float]] = field(default_factory=list)
    untestable: bool = False
    n_bootstrap: int = 0


def _toc_and_rates(scores, dr, ids):
    order = np.lexsort((ids, scores))
    sorted_dr = dr[order]
    csum = np.cumsum(sorted_dr)
    overall = csum[-1] / len(dr)
    n = len(dr)
    toc = np.empty(len(TOC_GRID))
    for i, q in enumerate(TOC_GRID):
        k = int(np.ceil(q * n))
        k = min(max(k, 1), n)
        toc[i] = csum[k - 1] / k - overall
    dq = 0.02
    qini = float(np.sum(TOC_GRID * toc) * dq)
    autoc = float(np.sum(toc) * dq)
    return toc, qini, autoc


def rate_qini(scores, dr_scores, clusters, weighting: str = "qini",
              n_bootstrap: int = 200, seed: int = 0, row_key=None) -> RateResult:
    """Rank-weighted average treatment effect of a prioritization rule.

    TOC(q) is the mean doubly robust score among the worst-q fraction
    (ascending scores) minus the overall mean; the RATE aggregates
    w(q) * TOC(q) over the grid with w(q) = q (Qini) or w = 1 (AUTOC).
    The standard error comes from a half-sample bootstrap over clusters.
    """
    if weighting not in ("qini", "autoc"):
        raise DataError(f"unknown weighting {weighting!r}")
    scores = np.asarray(scores, dtype=float)
    dr = np.asarray(dr_scores, dtype=float)
    clusters = np.asarray(clusters)
    ids = (np.asarray(row_key) if row_key is not None
           else np.arange(len(scores)))
    order = np.argsort(ids, kind="stable")
    scores, dr, clusters, ids = scores[order], dr[order], clusters[order], ids[order]

    toc, qini, autoc = _toc_and_rates(scores, dr, ids)
    untestable = bool(np.all(scores == scores[0]))

    uniq = np.unique(clusters)
    reps = np.empty(n_bootstrap)
    half = len(uniq) // 2
    for b in range(n_bootstrap):
        rng = substream(seed, f"rate/{b}")
        chosen = rng.choice(uniq, size=half, replace=False)
        mask = np.isin(clusters, chosen)
        if mask.sum() < 2:
            reps[b] = np.nan
            continue
        _, q_b, a_b = _toc_and_rates(scores[mask], dr[mask], ids[mask])
        reps[b] = q_b if weighting == "qini" else a_b
    se = float(np.nanstd(reps, ddof=1)) if n_bootstrap > 1 else float("nan")
    return RateResult(
        qini=qini, autoc=autoc, se=se, weighting=weighting,
        toc_curve=[(float(q), float(t)) for q, t in zip(TOC_GRID, toc)],
        untestable=untestable, n_bootstrap=n_bootstrap,
    )


def horizon_column(prefix: str, k: int) -> str:
    if k < 0:
        return f"{prefix}_m{-k}"
    if k == 0:
        return f"{prefix}_0"
    return f"{prefix}_p{k}"


def event_time_ate(data: pd.DataFrame, groups, horizons=range(-3, 11),
                   outcome_prefix: str = "y", balanced_only: bool = False,
                   reference_group=None):
    """Group ATEs per horizon plus raw treated/control mean trajectories.

    Trajectories are reported relative to the reference (median) group's
    pooled mean at horizon -1. With balanced_only, the sample is
    restricted to workers observed at every horizon.
    """
    data = data.copy()
    data["_group"] = np.asarray(groups)
    cols = [horizon_column(outcome_prefix, k) for k in horizons]
    missing = [c for c in cols if c not in data.columns]
    if missing:
        raise DataError(f"missing outcome columns: {missing}")
    if balanced_only:
        data = data[data[cols].notna().all(axis=1)]

    labels = sorted(data["_group"].dropna().unique())
    if reference_group is None:
        reference_group = labels[len(labels) // 2]
    ref_col = horizon_column(outcome_prefix, -1)
    ref = data.loc[data["_group"] == reference_group, ref_col]
    offset = float(ref.mean()) if ref_col in data.columns and len(ref) else 0.0

    estimates: list[tuple[int, GroupEstimate]] = []
    for k in horizons:
        col = horizon_column(outcome_prefix, k)
        for est in group_ate(data, data["_group"], outcome=col):
            estimates.append((k, est))
    rows = []
    for k in horizons:
        col = horizon_column(outcome_prefix, k)
        for label, sub in data.groupby("_group", sort=True):
            for arm, arm_label in ((1, "treated"), (0, "control")):
                vals = sub.loc[sub["treated"] == arm, col].dropna()
                rows.append({
                    "group": label, "horizon": k, "arm": arm_label,
                    "mean": float(vals.mean()) - offset if len(vals) else np.nan,
                    "n": len(vals),
                })
    return estimates, pd.DataFrame(rows)


def interaction_regressions(data: pd.DataFrame, covariates: list[str],
                            outcome: str = "y_p1") -> pd.DataFrame:
    """Per-covariate OLS of the outcome on treatment, the covariate, and
    their interaction; continuous covariates are standardized first,
    dummies enter as they are. Reports the interaction coefficient with
    establishment-clustered SE."""
    data = _canonical(data)
    w = data["treated"].to_numpy(dtype=float)
    y = data[outcome].to_numpy(dtype=float)
    cl = data["establishment_id"].to_numpy()
    ids = data["worker_id"].to_numpy()
    rows = []
    for name in covariates:
        x = data[name].to_numpy(dtype=float)
        vals = np.unique(x)
        is_dummy = len(vals) <= 2 and np.isin(vals, (0.0, 1.0)).all()
        if not is_dummy:
            sd = x.std()
            x = (x - x.mean()) / (sd if sd > 0 else 1.0)
        X = np.column_stack([np.ones(len(x)), w, x, w * x])
        beta, se = cluster_ols(X, y, cl, row_key=ids)
        rows.append({
            "covariate": name, "kind": "dummy" if is_dummy else "continuous",
            "interaction": float(beta[3]), "se": float(se[3]),
            "main_effect": float(beta[1]),
        })
    return pd.DataFrame(rows)


def within_cell_quartiles(values: np.ndarray, ids: np.ndarray,
                          cells: np.ndarray, q: int = 4) -> np.ndarray:
    """Quantile groups recomputed within each cell (schooling x age style)."""
    from .crossfit import quantile_bins

    values = np.asarray(values, dtype=float)
    ids = np.asarray(ids)
    cells = np.asarray(cells)
    out = np.zeros(len(values), dtype=np.int64)
    df = pd.DataFrame({"i": np.arange(len(values)), "cell": cells})
    for _, idx in df.groupby("cell").groups.items():
        sel = df.loc[idx, "i"].to_numpy()
        out[sel] = quantile_bins(values[sel], ids[sel], q)
    return out


def profile_quantiles(data: pd.DataFrame, groups, covariates: list[str]) -> pd.DataFrame:
    """Covariate profiles across quantile groups.

    Continuous covariates are reported as standardized means per group
    (z-scored over the whole sample); dummies as raw shares. The
    bottom-minus-top difference contrasts the most negative group with
    the most positive one.
    """
    data = data.copy()
    data["_group"] = np.asarray(groups)
    data = data[data["_group"] > 0] if np.issubdtype(np.asarray(groups).dtype, np.number) else data
    labels = sorted(data["_group"].unique())
    rows = []
    for name in covariates:
        x = data[name].to_numpy(dtype=float)
        vals = np.unique(x[~np.isnan(x)])
        is_dummy = len(vals) <= 2 and np.isin(vals, (0.0, 1.0)).all()
        col = x if is_dummy else (x - np.nanmean(x)) / (np.nanstd(x) or 1.0)
        data["_std"] = col
        means = data.groupby("_group")["_std"].mean()
        row = {"covariate": name, "kind": "dummy" if is_dummy else "continuous"}
        for lbl in labels:
            row[f"group_{lbl}"] = float(means[lbl])
        row["bottom_minus_top"] = float(means[labels[0]] - means[labels[-1]])
        rows.append(row)
    return pd.DataFrame(rows)


def insurance_degree(ate_earnings: float, ate_disposable: float) -> float:
    """Share of the gross earnings effect absorbed before disposable
    income: (earnings ATE - disposable ATE) / earnings ATE."""
    if ate_earnings == 0:
        raise DataError("insurance degree undefined for zero earnings effect")
    return (ate_earnings - ate_disposable) / ate_earnings


def outcome_distribution(data: pd.DataFrame, outcome: str = "y_p1",
                         bin_width: float = 0.05, max_rel: float = 2.0):
    """Binned densities of relative earnings for treated and controls,
    with the mass at exactly zero reported separately."""
    edges = np.round(np.arange(0.0, max_rel + bin_width, bin_width), 10)
    rows = []
    means = {}
    zero = {}
    for arm, label in ((1, "treated"), (0, "control")):
        vals = data.loc[data["treated"] == arm, outcome].dropna().to_numpy()
        n = len(vals)
        if n == 0:
            raise DataError(f"no {label} outcomes")
        means[label] = float(vals.mean())
        zero[label] = float((vals == 0.0).mean())
        pos = vals[vals > 0]
        hist, _ = np.histogram(np.clip(pos, 0, max_rel - 1e-12), bins=edges)
        for i, c in enumerate(hist):
            rows.append({
                "arm": label, "bin_lo": float(edges[i]), "bin_hi": float(edges[i + 1]),
                "density": float(c / n),
            })
    table = pd.DataFrame(rows)
    table.attrs["zero_mass"] = zero
    table.attrs["means"] = means
    return table
