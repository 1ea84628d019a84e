"""Propensity-score matching: year-specific logits, common-support
trimming, and greedy nearest-neighbor matching without replacement.

Never reusing a control is what lets the matched sample be split into
independent establishment-clustered folds later, so the without-
replacement discipline is enforced globally. Greedy order processes
treated workers by descending score: hard-to-match high-score treated
pick first. All tie-breaks fall back to worker id, which makes the output
independent of input row order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DataError

__all__ = [
    "PropensityModel",
    "MatchSet",
    "fit_propensity",
    "trim_common_support",
    "match_controls",
    "balance_report",
    "match_dataset",
    "attach_matches",
]

MAX_ITER = 200
GRAD_TOL = 1e-8
SEPARATION_BOUND = 30.0


@dataclass
class PropensityModel:
    year: int
    coefficients: dict[str, float]          # original covariate scale
    intercept: float
    coefficients_std: dict[str, float]      # z-scored scale used in fitting
    intercept_std: float
    means: dict[str, float]
    sds: dict[str, float]
    n_iter: int = 0

    def predict(self, data: pd.DataFrame) -> np.ndarray:
        z = self.intercept_std * np.ones(len(data))
        for name, beta in self.coefficients_std.items():
            x = data[name].to_numpy(dtype=float)
            z = z + beta * (x - self.means[name]) / self.sds[name]
        return 1.0 / (1.0 + np.exp(-z))


@dataclass
class MatchSet:
    treated_id: int
    control_ids: list[int]
    match_year: int
    shortfall: bool = False


def _is_dummy(x: np.ndarray) -> bool:
    vals = np.unique(x[~np.isnan(x)])
    return len(vals) <= 2 and np.isin(vals, (0.0, 1.0)).all()


def fit_propensity(dataset: pd.DataFrame, year: int,
                   covariates: list[str]) -> PropensityModel:
    """Maximum-likelihood logit of treatment on the matching covariates.

    Continuous covariates are z-scored within the year before fitting
    (better conditioning); coefficients are reported on both scales.
    Newton iterations stop at gradient sup-norm < 1e-8 or 200 rounds;
    apparent perfect separation raises an error naming the covariate with
    the largest standardized coefficient.
    """
    rows = dataset[dataset["event_year"] == year]
    y = rows["treated"].to_numpy(dtype=float)
    if len(np.unique(y)) < 2:
        raise DataError(f"year {year}: need both treated and control workers")

    means, sds = {}, {}
    cols = [np.ones(len(rows))]
    for name in covariates:
        x = rows[name].to_numpy(dtype=float)
        if _is_dummy(x):
            means[name], sds[name] = 0.0, 1.0
        else:
            means[name] = float(x.mean())
            sd = float(x.std())
            sds[name] = sd if sd > 0 else 1.0
        cols.append((x - means[name]) / sds[name])
    X = np.column_stack(cols)

    beta = np.zeros(X.shape[1])
    share = y.mean()
    beta[0] = np.log(share / (1 - share))
    n_iter = 0
    for n_iter in range(1, MAX_ITER + 1):
        eta = X @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        grad = X.T @ (y - p)
        if np.max(np.abs(grad)) < GRAD_TOL:
            break
        if np.max(np.abs(eta)) > SEPARATION_BOUND:
            worst = int(np.argmax(np.abs(beta[1:])))
            raise DataError(
                f"year {year}: apparent perfect separation on covariate "
                f"{covariates[worst]!r}"
            )
        w = np.clip(p * (1.0 - p), 1e-12, None)
        H = (X * w[:, None]).T @ X
        beta = beta + np.linalg.solve(H, grad)

    p = 1.0 / (1.0 + np.exp(-(X @ beta)))
    if (p[y == 1] > 0.999).all() and (p[y == 0] < 0.001).all():
        worst = int(np.argmax(np.abs(beta[1:])))
        raise DataError(
            f"year {year}: apparent perfect separation on covariate "
            f"{covariates[worst]!r}"
        )

    coef_std = dict(zip(covariates, beta[1:]))
    coef_orig = {k: coef_std[k] / sds[k] for k in covariates}
    b0 = float(beta[0] - sum(coef_std[k] * means[k] / sds[k] for k in covariates))
    return PropensityModel(
        year=year, coefficients=coef_orig, intercept=b0,
        coefficients_std=coef_std, intercept_std=float(beta[0]),
        means=means, sds=sds, n_iter=n_iter,
    )


def trim_common_support(scores_treated: np.ndarray, scores_control: np.ndarray):
    """Keep units inside [max of minima, min of maxima] of the two score
    distributions. Returns (kept_treated, kept_control, lo, hi)."""
    st = np.asarray(scores_treated, dtype=float)
    sc = np.asarray(scores_control, dtype=float)
    if len(st) == 0 or len(sc) == 0:
        raise DataError("common support needs nonempty score sets")
    lo = max(st.min(), sc.min())
    hi = min(st.max(), sc.max())
    if lo > hi:
        raise DataError("empty common-support region")
    return (st >= lo) & (st <= hi), (sc >= lo) & (sc <= hi), float(lo), float(hi)


def match_controls(treated_scores, treated_ids, control_scores, control_ids,
                   k: int = 3, match_year: int = 0,
                   caliper: float | None = None) -> list[MatchSet]:
    """Greedy nearest-neighbor matching on absolute score distance.

    Treated are processed in descending score order (ties by worker id);
    each control is used at most once, globally. Exhausted pools leave a
    shortfall flag rather than reusing controls.
    """
    ts = np.asarray(treated_scores, dtype=float)
    ti = np.asarray(treated_ids)
    cs = np.asarray(control_scores, dtype=float)
    ci = np.asarray(control_ids)

    c_order = np.lexsort((ci, cs))
    cs, ci = cs[c_order], ci[c_order]
    used = np.zeros(len(cs), dtype=bool)

    t_order = np.lexsort((ti, -ts))
    out: list[MatchSet] = []
    for idx in t_order:
        score = ts[idx]
        chosen: list[int] = []
        pos = int(np.searchsorted(cs, score))
        left, right = pos - 1, pos
        while len(chosen) < k:
            while left >= 0 and used[left]:
                left -= 1
            while right < len(cs) and used[right]:
                right += 1
            have_l = left >= 0
            have_r = right < len(cs)
            if not have_l and not have_r:
                break
            d_l = score - cs[left] if have_l else np.inf
            d_r = cs[right] - score if have_r else np.inf
            if d_l < d_r or (d_l == d_r and (not have_r or ci[left] < ci[right])):
                pick, left = left, left - 1
            else:
                pick, right = right, right + 1
            if caliper is not None and abs(cs[pick] - score) > caliper:
                break
            used[pick] = True
            chosen.append(int(ci[pick]))
        out.append(MatchSet(int(ti[idx]), chosen, match_year, shortfall=len(chosen) < k))
    out.sort(key=lambda m: m.treated_id)
    return out


def balance_report(dataset: pd.DataFrame, matches: list[MatchSet],
                   covariates: list[str], flag_threshold: float = 0.1) -> pd.DataFrame:
    """Standardized mean differences before and after matching."""
    treated_ids = [m.treated_id for m in matches]
    control_ids = [c for m in matches for c in m.control_ids]
    t_all = dataset[dataset["treated"] == 1]
    c_all = dataset[dataset["treated"] == 0]
    t_m = dataset[dataset["worker_id"].isin(treated_ids)]
    c_m = dataset[dataset["worker_id"].isin(control_ids)]

    def smd(a: pd.Series, b: pd.Series) -> float:
        pooled = np.sqrt((a.var(ddof=1) + b.var(ddof=1)) / 2.0)
        if not np.isfinite(pooled) or pooled == 0:
            return 0.0
        return float((a.mean() - b.mean()) / pooled)

    rows = []
    for name in covariates:
        before = smd(t_all[name], c_all[name])
        after = smd(t_m[name], c_m[name])
        rows.append({
            "covariate": name,
            "smd_before": before,
            "smd_after": after,
            "flagged": abs(after) > flag_threshold,
        })
    report = pd.DataFrame(rows)
    report.attrs["matching_ratio"] = len(control_ids) / max(len(treated_ids), 1)
    report.attrs["n_treated"] = len(treated_ids)
    report.attrs["n_controls"] = len(control_ids)
    report.attrs["n_shortfall"] = sum(m.shortfall for m in matches)
    return report


def attach_matches(dataset: pd.DataFrame, matches: list[MatchSet],
                   scores: pd.Series | None = None) -> pd.DataFrame:
    """Analysis table of matched workers.

    Keeps treated workers with at least one control plus their controls;
    adds match_id (the treated worker of the group) and event_establishment
    (the closing establishment the group follows in fold assignment and
    group analyses).
    """
    pairs: dict[int, int] = {}
    for m in matches:
        if not m.control_ids:
            continue
        pairs[m.treated_id] = m.treated_id
        for c in m.control_ids:
            pairs[c] = m.treated_id
    sub = dataset[dataset["worker_id"].isin(pairs.keys())].copy()
    sub["match_id"] = sub["worker_id"].map(pairs)
    est_of = dataset.set_index("worker_id")["establishment_id"]
    sub["event_establishment"] = sub["match_id"].map(est_of)
    if scores is not None:
        sub["pscore"] = sub["worker_id"].map(scores)
    return sub.sort_values("worker_id").reset_index(drop=True)


def match_dataset(dataset: pd.DataFrame, covariates: list[str], k: int = 3,
                  caliper: float | None = None) -> tuple[pd.DataFrame, pd.DataFrame, list[PropensityModel]]:
    """Year-by-year propensity matching over the full dataset.

    Returns (matched table, balance report, fitted models).
    """
    all_matches: list[MatchSet] = []
    models: list[PropensityModel] = []
    scores = pd.Series(np.nan, index=dataset["worker_id"])
    for year in sorted(dataset["event_year"].unique()):
        rows = dataset[dataset["event_year"] == year]
        model = fit_propensity(dataset, year, covariates)
        p = model.predict(rows)
        treated = rows["treated"].to_numpy() == 1
        scores.loc[rows["worker_id"]] = p
        keep_t, keep_c, _, _ = trim_common_support(p[treated], p[~treated])
        t_rows = rows[treated][keep_t]
        c_rows = rows[~treated][keep_c]
        if len(t_rows) == 0:
            raise DataError(f"year {year}: no treated workers on common support")
        matches = match_controls(
            p[treated][keep_t], t_rows["worker_id"].to_numpy(),
            p[~treated][keep_c], c_rows["worker_id"].to_numpy(),
            k=k, match_year=int(year), caliper=caliper,
        )
        all_matches.extend(matches)
        models.append(model)
    balance = balance_report(dataset, all_matches, covariates)
    matched = attach_matches(dataset, all_matches, scores)
    return matched, balance, models
