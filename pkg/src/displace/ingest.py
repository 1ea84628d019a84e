"""Panel ingestion: closures, samples, covariates, outcomes.

Input is a worker-year panel (one row per job; docs/schema.md documents
the columns). The pass selects each worker's main job per year, detects
establishment closures, screens out false closures, applies the sample
restrictions, and derives the covariate set and normalized-earnings
outcomes for displaced workers and eligible controls.

Employment in a year means earning at least three monthly minimum wages
from a single employer; the minimum is proxied by the year's 10th
percentile of positive annual earnings unless supplied explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .covariates import churn_rate, growth_metric, hhi, reallocation_rate
from .errors import DataError

__all__ = [
    "ClosureEvent",
    "REQUIRED_COLUMNS",
    "main_jobs",
    "employment_threshold",
    "detect_closures",
    "filter_false_closures",
    "build_samples",
    "derive_covariates",
    "compute_outcomes",
    "ingest_panel",
]

REQUIRED_COLUMNS = (
    "worker_id", "year", "establishment_id", "firm_id", "industry_code",
    "location_id", "earnings", "age", "schooling_years",
)

MIN_BASE_EMPLOYMENT = 5
RETENTION_SHARE = 0.10
FALSE_CLOSURE_SHARE = 0.30
AGE_RANGE = (24, 60)
MIN_TENURE = 3
TENURE_CAP = 10
ROUTINE_CELL_MIN = 100

PASSTHROUGH_WORKER = (
    "female", "immigrant_status", "married", "divorced", "children",
    "school_aged_children", "share_household_income", "born_outside_county",
    "past_mobility", "stem", "licensed_field", "manager", "disposable_income",
)
ATTRIBUTE_COLUMNS = (
    "population_density", "location_unemployment", "is_manufacturing",
    "is_public", "national_unemployment",
)


@dataclass
class ClosureEvent:
    establishment_id: int
    event_year: int
    n_displaced: int
    is_false_closure: bool = False


def _check_panel(panel: pd.DataFrame) -> None:
    missing = [c for c in REQUIRED_COLUMNS if c not in panel.columns]
    if missing:
        raise DataError(f"panel is missing required columns: {missing}")
    if (panel["earnings"] < 0).any():
        raise DataError("earnings must be nonnegative")


def main_jobs(panel: pd.DataFrame) -> pd.DataFrame:
    """One row per (worker, year): the job with the highest earnings.

    Ties break toward the smallest establishment id and are flagged in
    main_job_tie.
    """
    _check_panel(panel)
    ordered = panel.sort_values(
        ["worker_id", "year", "earnings", "establishment_id"],
        ascending=[True, True, False, True], kind="stable",
    )
    grp = ordered.groupby(["worker_id", "year"], sort=False)
    top = grp.head(1).copy()
    max_earn = grp["earnings"].transform("max")
    ties = ordered[ordered["earnings"] == max_earn].groupby(
        ["worker_id", "year"], sort=False
    ).size()
    top = top.set_index(["worker_id", "year"])
    top["main_job_tie"] = ties > 1
    return top.reset_index()


def employment_threshold(jobs: pd.DataFrame, year: int,
                         monthly_min: float | None = None) -> float:
    """Annual earnings floor for counting as employed: three monthly
    minimum wages, the minimum proxied by the year's 10th percentile of
    positive earnings divided by twelve."""
    if monthly_min is not None:
        return 3.0 * monthly_min
    earn = jobs.loc[(jobs["year"] == year) & (jobs["earnings"] > 0), "earnings"]
    if earn.empty:
        raise DataError(f"year {year}: no positive earnings to anchor the floor")
    return 3.0 * float(np.quantile(earn, 0.10)) / 12.0


def _employment_by_year(jobs: pd.DataFrame, years, monthly_min=None) -> pd.DataFrame:
    """Main jobs restricted to rows that clear the employment floor."""
    pieces = []
    for year in years:
        floor = employment_threshold(jobs, year, monthly_min)
        sub = jobs[(jobs["year"] == year) & (jobs["earnings"] >= floor)]
        pieces.append(sub)
    return pd.concat(pieces, ignore_index=True) if pieces else jobs.iloc[0:0]


def _employment_counts(employed: pd.DataFrame, year: int) -> pd.Series:
    return employed[employed["year"] == year].groupby("establishment_id").size()


def detect_closures(panel: pd.DataFrame, year: int,
                    monthly_min: float | None = None) -> list[ClosureEvent]:
    """Closing establishments in the given year.

    A closure had at least five employees in year-1, retains at most 10%
    of that employment by year+1, and shows some activity (at least one
    worker record) during the closure year itself.
    """
    jobs = main_jobs(panel)
    years_present = set(jobs["year"].unique())
    if not {year - 1, year + 1} <= years_present:
        raise DataError(f"panel must cover years {year - 1} and {year + 1}")
    employed = _employment_by_year(jobs, [year - 1, year + 1], monthly_min)
    base = _employment_counts(employed, year - 1)
    after = _employment_counts(employed, year + 1)
    active_in_t = set(jobs.loc[jobs["year"] == year, "establishment_id"].unique())

    events = []
    for est, n0 in base.sort_index().items():
        if n0 < MIN_BASE_EMPLOYMENT:
            continue
        n1 = int(after.get(est, 0))
        if n1 > RETENTION_SHARE * n0:
            continue
        if est not in active_in_t:
            continue
        events.append(ClosureEvent(int(est), int(year), int(n0)))
    return events


def filter_false_closures(events: list[ClosureEvent],
                          panel: pd.DataFrame,
                          monthly_min: float | None = None) -> list[ClosureEvent]:
    """Flag apparent closures where at least 30% of the affected workers
    moved together to a single new establishment, or into other
    establishments of the original firm. Flagged events are excluded from
    both the treated and control pools downstream."""
    jobs = main_jobs(panel)
    out = []
    for ev in events:
        t = ev.event_year
        before = jobs[(jobs["year"] == t - 1) & (jobs["establishment_id"] == ev.establishment_id)]
        workers = before["worker_id"].unique()
        firm = before["firm_id"].iloc[0] if len(before) else None
        dest = jobs[(jobs["year"] == t + 1) & (jobs["worker_id"].isin(workers))]
        dest = dest[dest["establishment_id"] != ev.establishment_id]
        n = len(workers)
        flagged = False
        if n > 0 and len(dest):
            top_dest = dest.groupby("establishment_id").size().max()
            if top_dest / n >= FALSE_CLOSURE_SHARE:
                flagged = True
            within_firm = (dest["firm_id"] == firm).sum()
            if within_firm / n >= FALSE_CLOSURE_SHARE:
                flagged = True
        out.append(ClosureEvent(ev.establishment_id, ev.event_year, ev.n_displaced, flagged))
    return out


def _tenure_years(jobs: pd.DataFrame, year: int, employed_rows: pd.DataFrame):
    """Consecutive years at the year-1 establishment (capped) plus years in
    the year-1 industry over the lookback window, and years employed."""
    window = list(range(year - TENURE_CAP, year))
    hist = employed_rows[employed_rows["year"].isin(window)]
    at = hist.set_index(["worker_id", "year"])[["establishment_id", "industry_code"]]

    base = at.xs(year - 1, level="year", drop_level=True)

    tenure = pd.Series(0, index=base.index)
    industry_tenure = pd.Series(0, index=base.index)
    alive = pd.Series(True, index=base.index)
    for back, yr in enumerate(sorted(window, reverse=True)):
        try:
            rows = at.xs(yr, level="year", drop_level=True)
        except KeyError:
            rows = base.iloc[0:0]
        same_est = base["establishment_id"].eq(rows["establishment_id"].reindex(base.index))
        alive &= same_est.fillna(False)
        tenure += alive.astype(int)
        same_ind = base["industry_code"].eq(rows["industry_code"].reindex(base.index))
        industry_tenure += same_ind.fillna(False).astype(int)
    experience = hist.groupby("worker_id").size().reindex(base.index).fillna(0)
    return (tenure.clip(upper=TENURE_CAP), industry_tenure.clip(upper=TENURE_CAP),
            experience.clip(upper=TENURE_CAP))


def build_samples(panel: pd.DataFrame, events: list[ClosureEvent], year: int,
                  monthly_min: float | None = None) -> pd.DataFrame:
    """Displaced workers and eligible controls for one event year.

    Treated: aged 24-60 with at least three years of tenure at a (genuine)
    closing establishment in year-1. Controls face identical restrictions
    at establishments with at least five employees in year-1 that keep
    more than 10% of that size through year+1. Workers at false closures
    are dropped from both pools.
    """
    jobs = main_jobs(panel)
    years_present = set(jobs["year"].unique())
    if not {year - 1, year + 1} <= years_present:
        raise DataError(f"panel must cover years {year - 1} and {year + 1}")
    lookback = [y for y in range(year - TENURE_CAP, year + 2) if y in years_present]
    employed = _employment_by_year(jobs, lookback, monthly_min)

    closing = {e.establishment_id for e in events if not e.is_false_closure}
    false_est = {e.establishment_id for e in events if e.is_false_closure}

    base = _employment_counts(employed, year - 1)
    after = _employment_counts(employed, year + 1)
    eligible_est = {
        int(est) for est, n0 in base.items()
        if n0 >= MIN_BASE_EMPLOYMENT
        and int(after.get(est, 0)) > RETENTION_SHARE * n0
        and est not in closing and est not in false_est
    }

    at_base = employed[employed["year"] == year - 1].copy()
    at_base = at_base[~at_base["establishment_id"].isin(false_est)]
    at_base = at_base[
        at_base["establishment_id"].isin(closing)
        | at_base["establishment_id"].isin(eligible_est)
    ]
    at_base = at_base[at_base["age"].between(*AGE_RANGE)]

    tenure, industry_tenure, experience = _tenure_years(jobs, year, employed)
    at_base = at_base.set_index("worker_id")
    at_base["tenure"] = tenure
    at_base["industry_tenure"] = industry_tenure
    at_base["experience"] = experience
    at_base = at_base[at_base["tenure"] >= MIN_TENURE]

    sample = at_base.reset_index()
    sample["treated"] = sample["establishment_id"].isin(closing).astype(np.int8)
    if sample["treated"].sum() == 0:
        raise DataError(f"year {year}: no displaced workers survive the restrictions")
    sample["event_year"] = year
    sample = sample.rename(columns={"industry_code": "industry_id"})
    sample["match_id"] = sample["worker_id"]
    sample["event_establishment"] = sample["establishment_id"]
    return sample.sort_values("worker_id").reset_index(drop=True)


def _mincer_residuals(jobs_year: pd.DataFrame) -> pd.Series:
    """Year-specific residual log earnings (industry, schooling, field,
    gender, immigrant status, age dummies, where available)."""
    sub = jobs_year[jobs_year["earnings"] > 0].copy()
    y = np.log(sub["earnings"].to_numpy(dtype=float))
    pieces = [np.ones((len(sub), 1))]
    if "schooling_years" in sub:
        pieces.append(sub[["schooling_years"]].to_numpy(dtype=float))
    for col in ("female", "immigrant_status"):
        if col in sub:
            pieces.append(pd.get_dummies(sub[col], prefix=col).to_numpy(dtype=float))
    for col in ("industry_code", "education_field", "age"):
        if col in sub:
            pieces.append(pd.get_dummies(sub[col], prefix=col).to_numpy(dtype=float))
    X = np.hstack(pieces)
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    return pd.Series(y - X @ beta, index=sub.index)


def _leave_one_out_premium(sample: pd.DataFrame, resid: pd.Series) -> tuple[pd.Series, pd.Series]:
    """Establishment premium (leave-one-out coworker mean residual, as a
    deviation from the industry mean) and the industry premium itself."""
    df = pd.DataFrame({
        "establishment_id": sample["establishment_id"],
        "industry_id": sample["industry_id"],
        "resid": resid.reindex(sample.index),
    })
    grp = df.groupby("establishment_id")["resid"]
    est_sum, est_n = grp.transform("sum"), grp.transform("count")
    loo = (est_sum - df["resid"]) / (est_n - 1)
    loo[est_n < 2] = np.nan
    ind_mean = df.groupby("industry_id")["resid"].transform("mean")
    return loo - ind_mean, ind_mean


def _routine_imputed(sample: pd.DataFrame, jobs_year: pd.DataFrame) -> pd.Series:
    """Observed routine scores, imputed for missing workers from
    education-by-industry cell means; thin cells fall back to coarser ones."""
    routine = sample.get("routine_score")
    if routine is None:
        return pd.Series(np.nan, index=sample.index)
    routine = routine.copy()
    if routine.notna().all():
        return routine
    ref = jobs_year[jobs_year.get("routine_score").notna()] if "routine_score" in jobs_year else jobs_year.iloc[0:0]
    lvl = [c for c in ("education_level", "education_field") if c in sample.columns and c in ref.columns]
    specs = []
    if lvl:
        specs.append(lvl + ["industry_code"])
        if "industry_1digit" not in ref.columns and "industry_code" in ref.columns:
            ref = ref.assign(industry_1digit=ref["industry_code"] // 100)
        specs.append(lvl + ["industry_1digit"])
        specs.append(lvl)
    for spec in specs:
        if routine.notna().all():
            break
        key_cols = [c if c != "industry_code" else "industry_id" for c in spec]
        if not set(key_cols) <= set(sample.columns):
            if "industry_1digit" in key_cols and "industry_id" in sample.columns:
                sample = sample.assign(industry_1digit=sample["industry_id"] // 100)
            else:
                continue
        cells = ref.groupby(spec)["routine_score"].agg(["mean", "size"])
        cells = cells[cells["size"] >= ROUTINE_CELL_MIN]["mean"]
        if cells.empty:
            continue
        keys = pd.MultiIndex.from_frame(sample[key_cols]) if len(key_cols) > 1 \
            else pd.Index(sample[key_cols[0]])
        fill = pd.Series(cells.reindex(keys).to_numpy(), index=sample.index)
        routine = routine.fillna(fill)
    if routine.isna().any() and "routine_score" in ref:
        routine = routine.fillna(ref["routine_score"].mean())
    return routine


def derive_covariates(panel: pd.DataFrame, sample: pd.DataFrame, year: int,
                      monthly_min: float | None = None) -> pd.DataFrame:
    """All establishment, industry, and location covariates for one event
    year, measured in year-1. Missing continuous values get the year
    median plus a missingness dummy; missing dummies get zero plus the
    missingness dummy."""
    jobs = main_jobs(panel)
    years_present = sorted(set(jobs["year"].unique()))
    employed = _employment_by_year(jobs, years_present, monthly_min)
    base_year = year - 1
    at_base = employed[employed["year"] == base_year]
    out = sample.copy()

    # earnings history: rank within the pooled sample, growth to year-1
    earn = jobs.set_index(["worker_id", "year"])["earnings"]
    e_m1 = earn.reindex(pd.MultiIndex.from_product([out["worker_id"], [base_year]])).to_numpy()
    out["earn_rank"] = pd.Series(e_m1).rank(method="average") / len(out)
    for lag, col in ((2, "rel_earn_m2"), (3, "rel_earn_m3")):
        e_lag = earn.reindex(
            pd.MultiIndex.from_product([out["worker_id"], [year - lag]])
        ).to_numpy()
        with np.errstate(divide="ignore", invalid="ignore"):
            out[col] = np.where(e_m1 > 0, np.nan_to_num(e_lag, nan=0.0) / e_m1, np.nan)

    # establishment size and its trend
    emp_by_year = {
        y: _employment_counts(employed, y) for y in (base_year, year - 3, year - TENURE_CAP, year)
        if y in years_present
    }
    size = emp_by_year[base_year]
    out["plant_size"] = out["establishment_id"].map(size).astype(float)
    if year - 3 in emp_by_year:
        old = out["establishment_id"].map(emp_by_year[year - 3])
        with np.errstate(divide="ignore", invalid="ignore"):
            out["plant_size_trend"] = np.log(out["plant_size"]) - np.log(old.astype(float))
    else:
        out["plant_size_trend"] = np.nan

    # wage premia from Mincer residuals
    resid = _mincer_residuals(at_base)
    # align residuals to sample rows via worker ids
    resid_by_worker = pd.Series(resid.to_numpy(), index=at_base.loc[resid.index, "worker_id"])
    sample_resid = out["worker_id"].map(resid_by_worker)
    tmp = out[["establishment_id", "industry_id"]].copy()
    tmp["resid"] = sample_resid.to_numpy()
    grp = tmp.groupby("establishment_id")["resid"]
    loo = (grp.transform("sum") - tmp["resid"]) / (grp.transform("count") - 1)
    ind_mean = tmp.groupby("industry_id")["resid"].transform("mean")
    out["plant_wage_premium"] = (loo - ind_mean).to_numpy()
    out["industry_wage_premium"] = ind_mean.to_numpy()

    # industry dynamics from the panel
    ind_year_emp = employed.groupby(["industry_code", "year"]).size()

    def industry_metric(ind, y_from, y_to):
        a = ind_year_emp.get((ind, y_from), 0)
        b = ind_year_emp.get((ind, y_to), 0)
        if a == 0 and b == 0:
            return np.nan
        return growth_metric(a, b)

    inds = out["industry_id"].unique()
    trend = {i: industry_metric(i, year - TENURE_CAP, base_year) for i in inds}
    cycle = {i: industry_metric(i, base_year, year) for i in inds}
    out["industry_trend"] = out["industry_id"].map(trend)
    out["industry_cycle"] = out["industry_id"].map(cycle)

    churn, realloc = _industry_flow_rates(employed, years_present)
    out["industry_churn"] = out["industry_id"].map(churn)
    out["industry_realloc"] = out["industry_id"].map(realloc)

    # event size relative to the industry-location cell
    cell = at_base.groupby(["industry_code", "location_id"]).size()
    est_cell = out.groupby("establishment_id").size()
    cell_of_est = out.drop_duplicates("establishment_id").set_index("establishment_id")[
        ["industry_id", "location_id"]
    ]
    keys = pd.MultiIndex.from_frame(cell_of_est)
    cell_emp = pd.Series(cell.reindex(keys).to_numpy(), index=cell_of_est.index)
    disp = out[out["treated"] == 1].groupby("establishment_id").size()
    rel = (disp / cell_emp).reindex(out["establishment_id"]).fillna(0.0)
    out["event_rel_size"] = rel.to_numpy()

    # local structure: concentration and shift-share exposures
    loc_cell = at_base.groupby(["location_id", "industry_code"]).size()
    loc_tot = at_base.groupby("location_id").size()
    shares = loc_cell / loc_tot
    out["local_hhi"] = out["location_id"].map(
        shares.groupby("location_id").apply(lambda s: float((s ** 2).sum()))
    )
    exposures = {
        "local_trend": trend, "local_cycle": cycle,
        "local_churn": churn, "local_realloc": realloc,
    }
    for col, values in exposures.items():
        vals = pd.Series(values)
        expo = shares.mul(shares.index.get_level_values("industry_code").map(vals).to_numpy())
        out[col] = out["location_id"].map(expo.groupby("location_id").sum())
    if "is_manufacturing" in at_base.columns:
        manuf = at_base.groupby("location_id")["is_manufacturing"].mean()
        out["local_manuf_share"] = out["location_id"].map(manuf)

    # routineness, with the cell-mean imputation
    out["routine"] = _routine_imputed(out, at_base)

    # industry-education match and education specificity
    if {"education_level", "education_field"} <= set(out.columns):
        cell_key = at_base.groupby(["education_level", "education_field"])
        top10 = cell_key["industry_code"].apply(
            lambda s: set(s.value_counts().head(10).index)
        )
        edu_keys = pd.MultiIndex.from_frame(out[["education_level", "education_field"]])
        tops = top10.reindex(edu_keys)
        out["industry_edu_match"] = np.array([
            1.0 if isinstance(t, set) and ind in t else 0.0
            for t, ind in zip(tops, out["industry_id"])
        ])
        in_top = at_base.merge(
            top10.rename("tops"), left_on=["education_level", "education_field"],
            right_index=True, how="left",
        )
        mask = np.array([
            i in t if isinstance(t, set) else False
            for i, t in zip(in_top["industry_code"], in_top["tops"])
        ])
        spec = in_top.assign(in_top=mask).groupby(
            ["education_level", "education_field"]
        )["in_top"].mean()
        out["education_specificity"] = spec.reindex(edu_keys).to_numpy()

    out = _impute_missing(out)
    return out


def _industry_flow_rates(employed: pd.DataFrame, years: list[int]):
    """Time-averaged churning (establishment level) and excess reallocation
    (industry level) rates per industry."""
    est_emp = employed.groupby(["establishment_id", "year"]).size()
    est_ind = employed.groupby("establishment_id")["industry_code"].agg(
        lambda s: s.mode().iloc[0]
    )
    flows = employed.set_index(["worker_id", "year"])["establishment_id"]

    churn_rows = []
    realloc_rows = []
    for y0, y1 in zip(years[:-1], years[1:]):
        if y1 != y0 + 1:
            continue
        a = flows.xs(y0, level="year")
        b = flows.xs(y1, level="year")
        both = a.to_frame("from").join(b.to_frame("to"), how="outer")
        # establishment-level hires and separations between adjacent years
        hires = both[both["to"].notna() & (both["from"] != both["to"])].groupby("to").size()
        seps = both[both["from"].notna() & (both["from"] != both["to"])].groupby("from").size()
        ind_emp0: dict = {}
        ind_emp1: dict = {}
        creation: dict = {}
        destruction: dict = {}
        ests = set(est_emp.xs(y0, level="year").index) | set(est_emp.xs(y1, level="year").index)
        for est in ests:
            e0 = int(est_emp.get((est, y0), 0))
            e1 = int(est_emp.get((est, y1), 0))
            if e0 + e1 == 0:
                continue
            ind = est_ind.get(est)
            ind_emp0[ind] = ind_emp0.get(ind, 0) + e0
            ind_emp1[ind] = ind_emp1.get(ind, 0) + e1
            d = e1 - e0
            creation[ind] = creation.get(ind, 0) + max(d, 0)
            destruction[ind] = destruction.get(ind, 0) + max(-d, 0)
            h = int(hires.get(est, 0))
            s = int(seps.get(est, 0))
            churn_rows.append((ind, churn_rate(h, s, e1, e0), e0 + e1))
        for ind in ind_emp0:
            e0, e1 = ind_emp0[ind], ind_emp1.get(ind, 0)
            if e0 + e1 == 0:
                continue
            realloc_rows.append(
                (ind, reallocation_rate(creation.get(ind, 0), destruction.get(ind, 0), e1, e0))
            )
    churn_df = pd.DataFrame(churn_rows, columns=["industry", "rate", "w"])
    churn = churn_df.groupby("industry").apply(
        lambda g: np.average(g["rate"], weights=g["w"])
    ) if len(churn_df) else pd.Series(dtype=float)
    realloc_df = pd.DataFrame(realloc_rows, columns=["industry", "rate"])
    realloc = realloc_df.groupby("industry")["rate"].mean() if len(realloc_df) \
        else pd.Series(dtype=float)
    return churn.to_dict(), realloc.to_dict()


def _impute_missing(out: pd.DataFrame) -> pd.DataFrame:
    """Median-impute continuous covariates and zero-impute dummies, adding
    a missingness indicator per affected column."""
    skip = {"worker_id", "establishment_id", "firm_id", "industry_id", "location_id",
            "event_year", "treated", "match_id", "event_establishment", "year",
            "earnings", "main_job_tie"}
    for col in list(out.columns):
        if col in skip or out[col].dtype == object:
            continue
        vals = out[col]
        if not vals.isna().any():
            continue
        out[f"{col}_missing"] = vals.isna().astype(np.int8)
        nz = vals.dropna().unique()
        is_dummy = len(nz) <= 2 and np.isin(nz, (0.0, 1.0)).all()
        out[col] = vals.fillna(0.0 if is_dummy else vals.median())
    return out


def compute_outcomes(panel: pd.DataFrame, sample: pd.DataFrame, year: int,
                     horizons=range(-3, 11), monthly_min: float | None = None) -> pd.DataFrame:
    """Normalized earnings, employment, and mobility outcomes.

    y at horizon k is earnings(year+k) / earnings(year-1); a worker absent
    from the panel in a covered year counts as zero earnings, while years
    outside the panel's coverage stay missing. Industry moves are defined
    only for re-employed workers.
    """
    jobs = main_jobs(panel)
    years_present = set(jobs["year"].unique())
    earn = jobs.set_index(["worker_id", "year"])["earnings"]
    est = jobs.set_index(["worker_id", "year"])[["industry_code", "location_id"]]

    out = sample.copy()
    ids = out["worker_id"].to_numpy()
    base = earn.reindex(pd.MultiIndex.from_product([ids, [year - 1]])).to_numpy(dtype=float)
    if np.any(~(base > 0)):
        raise DataError("sampled workers must have positive earnings in year-1")

    base_ind = est["industry_code"].reindex(
        pd.MultiIndex.from_product([ids, [year - 1]])
    ).to_numpy()
    base_loc = est["location_id"].reindex(
        pd.MultiIndex.from_product([ids, [year - 1]])
    ).to_numpy()

    thresholds = {
        y: employment_threshold(jobs, y, monthly_min)
        for y in years_present
    }
    from .evaluate import horizon_column

    for k in horizons:
        y_k = year + k
        col = horizon_column("y", k)
        if y_k not in years_present:
            out[col] = np.nan
            continue
        e = earn.reindex(pd.MultiIndex.from_product([ids, [y_k]])).to_numpy(dtype=float)
        e = np.nan_to_num(e, nan=0.0)
        out[col] = e / base
        if k >= 1:
            employed_k = e >= thresholds[y_k]
            out[horizon_column("emp", k)] = employed_k.astype(np.int8)
            ind_k = est["industry_code"].reindex(
                pd.MultiIndex.from_product([ids, [y_k]])
            ).to_numpy()
            loc_k = est["location_id"].reindex(
                pd.MultiIndex.from_product([ids, [y_k]])
            ).to_numpy()
            move_loc = np.where(
                pd.notna(loc_k) & employed_k, (loc_k != base_loc).astype(float), np.nan
            )
            move_ind = np.where(
                pd.notna(ind_k) & employed_k, (ind_k != base_ind).astype(float), np.nan
            )
            out[horizon_column("location_move", k)] = move_loc
            out[horizon_column("industry_move", k)] = move_ind
    return out


def ingest_panel(panel: pd.DataFrame, years, monthly_min: float | None = None,
                 horizons=range(-3, 11)) -> pd.DataFrame:
    """Full ingestion over a range of event years.

    Deterministic and order-independent: output rows are sorted by
    (event_year, worker_id).
    """
    pieces = []
    for year in years:
        events = filter_false_closures(detect_closures(panel, year, monthly_min), panel)
        sample = build_samples(panel, events, year, monthly_min)
        sample = derive_covariates(panel, sample, year, monthly_min)
        sample = compute_outcomes(panel, sample, year, horizons, monthly_min)
        pieces.append(sample)
    out = pd.concat(pieces, ignore_index=True)
    return out.sort_values(["event_year", "worker_id"]).reset_index(drop=True)
