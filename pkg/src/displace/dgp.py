"""Synthetic clustered labor-market data with a known effect function.

Workers are nested in establishments nested in (industry x location)
markets. Displacement is assigned at the establishment level (all
coworkers together), the true effect on normalized earnings is a known
linear + interaction + age-threshold function of the covariates, and every
worker carries a structural decomposition of that effect into a
non-employment channel and a lost-rent channel:

    effect = -(1 - reemployment_prob) * benefit_level
             - bargaining_share * job_surplus

which is also the wage-model identity used by :func:`theory_effect`.

The generated table is the ground-truth oracle for every estimator test in
this package: the stored ``true_tau`` can be recomputed exactly from the
emitted covariates and the configuration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import pandas as pd

from ._rng import substream
from .errors import ConfigError

__all__ = [
    "DgpConfig",
    "default_config",
    "null_config",
    "theory_effect",
    "structural_wage",
    "generate_panel",
    "heterogeneity_index",
    "POST_HORIZONS",
    "PRE_HORIZONS",
    "COVARIATES",
]

# Analysis covariates emitted by the generator, with block tags used by the
# partial-effects rotation (location / industry / worker-and-job).
COVARIATES = {
    "age": "worker",
    "schooling": "worker",
    "tenure": "worker",
    "experience": "worker",
    "routine": "worker",
    "female": "worker",
    "manufacturing": "industry",
    "industry_trend": "industry",
    "log_density": "location",
    "local_unemployment": "location",
}

PRE_HORIZONS = (-3, -2, -1)
POST_HORIZONS = tuple(range(0, 11))


def _as_range(value) -> tuple[int, int]:
    lo, hi = int(value[0]), int(value[1])
    return lo, hi


@dataclass
class DgpConfig:
    """Parameters of the synthetic market generator.

    ``effect_coefficients`` maps covariate names to linear weights on the
    raw covariate scale; ``interaction_terms`` lists ((name_a, name_b),
    weight) products of mean-centered covariates; the age threshold adds
    ``threshold_weight`` whenever ``threshold_covariate > threshold_value``.
    The realized effect is recentered so that its mean over displaced
    workers equals ``intercept`` exactly.
    """

    n_markets: int = 40
    establishments_per_market: tuple[int, int] = (40, 60)
    workers_per_establishment: tuple[int, int] = (8, 12)
    closure_rate: float = 0.15
    effect_coefficients: dict[str, float] = field(default_factory=dict)
    interaction_terms: list[tuple[tuple[str, str], float]] = field(default_factory=list)
    intercept: float = 0.0
    threshold_covariate: str = "age"
    threshold_value: float = 50.0
    threshold_weight: float = 0.0
    noise_sd: float = 0.25
    cluster_noise_share: float = 0.3
    trajectory_slope: float = 0.012
    propensity_coefficients: dict[str, float] = field(default_factory=dict)
    nonemployment_share: float = 0.35
    benefit_level: float = 0.7
    bargaining_share: float = 0.3
    base_nonemployment: float = 0.03
    insurance_gradient: float = 0.6
    employment_threshold: float = 0.15
    event_year: int = 2005
    seed: int = 20050101

    def validate(self) -> None:
        if not (0.0 < self.closure_rate < 1.0):
            raise ConfigError(f"closure_rate must lie in (0,1), got {self.closure_rate}")
        if self.noise_sd < 0:
            raise ConfigError(f"noise_sd must be >= 0, got {self.noise_sd}")
        for name, rng_ in (
            ("establishments_per_market", self.establishments_per_market),
            ("workers_per_establishment", self.workers_per_establishment),
        ):
            lo, hi = _as_range(rng_)
            if lo < 1 or hi < lo:
                raise ConfigError(f"{name} range {rng_!r} is empty or degenerate")
        if self.n_markets < 1:
            raise ConfigError("n_markets must be >= 1")
        if not (0.0 <= self.cluster_noise_share <= 1.0):
            raise ConfigError("cluster_noise_share must lie in [0,1]")
        if not (0.0 <= self.nonemployment_share <= 1.0):
            raise ConfigError("nonemployment_share must lie in [0,1]")
        if not (0.0 < self.benefit_level <= 1.0):
            raise ConfigError("benefit_level must lie in (0,1]")
        if not (0.0 <= self.base_nonemployment < 1.0):
            raise ConfigError("base_nonemployment must lie in [0,1)")
        unknown = set(self.effect_coefficients) - set(COVARIATES)
        if unknown:
            raise ConfigError(f"effect_coefficients reference unknown covariates: {sorted(unknown)}")
        unknown = set(self.propensity_coefficients) - set(COVARIATES)
        if unknown:
            raise ConfigError(f"propensity_coefficients reference unknown covariates: {sorted(unknown)}")
        for pair, _ in self.interaction_terms:
            for nm in pair:
                if nm not in COVARIATES:
                    raise ConfigError(f"interaction term references unknown covariate {nm!r}")
        if self.threshold_weight != 0.0 and self.threshold_covariate not in COVARIATES:
            raise ConfigError(f"threshold covariate {self.threshold_covariate!r} unknown")

    @classmethod
    def from_dict(cls, raw: dict) -> "DgpConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown DGP config keys: {sorted(unknown)}")
        raw = dict(raw)
        if "establishments_per_market" in raw:
            raw["establishments_per_market"] = _as_range(raw["establishments_per_market"])
        if "workers_per_establishment" in raw:
            raw["workers_per_establishment"] = _as_range(raw["workers_per_establishment"])
        if "interaction_terms" in raw:
            raw["interaction_terms"] = [
                ((str(t["pair"][0]), str(t["pair"][1])), float(t["weight"]))
                for t in raw["interaction_terms"]
            ]
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["establishments_per_market"] = list(self.establishments_per_market)
        d["workers_per_establishment"] = list(self.workers_per_establishment)
        d["interaction_terms"] = [
            {"pair": [a, b], "weight": w} for (a, b), w in self.interaction_terms
        ]
        return d


def default_config(seed: int = 20050101) -> DgpConfig:
    """Calibrated default: mean effect -0.24 among displaced, wide
    heterogeneity driven by age, schooling, routineness and market
    conditions, with an age>50 kink and an age x routine interaction."""
    return DgpConfig(
        effect_coefficients={
            "age": -0.0060,
            "schooling": 0.0180,
            "tenure": -0.0120,
            "experience": 0.0060,
            "routine": -0.1500,
            "female": 0.0100,
            "manufacturing": -0.0550,
            "industry_trend": 0.0500,
            "log_density": 0.0350,
            "local_unemployment": -0.8000,
        },
        interaction_terms=[(("age", "routine"), -0.0080)],
        intercept=-0.24,
        threshold_weight=-0.10,
        propensity_coefficients={
            "age": 0.35,
            "manufacturing": 0.30,
            "industry_trend": -0.55,
        },
        seed=seed,
    )


def null_config(seed: int = 77) -> DgpConfig:
    """Randomized zero-effect variant used by null-safety checks."""
    return DgpConfig(intercept=0.0, threshold_weight=0.0, seed=seed)


def theory_effect(reemployment_prob: float, benefit_level: float,
                  bargaining_share: float, job_surplus: float) -> float:
    """Displacement effect implied by the stylized wage model.

    Returns ``-(1 - q) * b - beta * p`` for re-employment probability q,
    benefit level b, bargaining share beta and job surplus p.
    """
    q, b = reemployment_prob, benefit_level
    if not (0.0 <= q <= 1.0):
        raise ValueError(f"reemployment_prob must lie in [0,1], got {q}")
    if not (0.0 <= b <= 1.0):
        raise ValueError(f"benefit_level must lie in [0,1], got {b}")
    return -(1.0 - q) * b - bargaining_share * job_surplus


def structural_wage(outside_option: float, bargaining_share: float, job_surplus: float,
                    reemployment_prob: float, expected_alt_wage: float,
                    benefit_level: float) -> float:
    """Wage as re-employment-weighted outside option plus bargained rent."""
    q = reemployment_prob
    if not (0.0 <= q <= 1.0):
        raise ValueError(f"reemployment_prob must lie in [0,1], got {q}")
    del outside_option  # absorbed by the expectation term
    return q * expected_alt_wage + (1.0 - q) * benefit_level + bargaining_share * job_surplus


def heterogeneity_index(cov: pd.DataFrame, config: DgpConfig) -> np.ndarray:
    """Raw (uncentered) effect heterogeneity implied by the config.

    Linear terms on the raw scale, interaction products of mean-centered
    covariates, plus the threshold kink. The caller recenters.
    """
    h = np.zeros(len(cov), dtype=np.float64)
    for name, coef in config.effect_coefficients.items():
        h += coef * cov[name].to_numpy(dtype=np.float64)
    for (a, b), w in config.interaction_terms:
        xa = cov[a].to_numpy(dtype=np.float64)
        xb = cov[b].to_numpy(dtype=np.float64)
        h += w * (xa - xa.mean()) * (xb - xb.mean())
    if config.threshold_weight != 0.0:
        xt = cov[config.threshold_covariate].to_numpy(dtype=np.float64)
        h += config.threshold_weight * (xt > config.threshold_value)
    return h


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def _structural_params(tau: np.ndarray, config: DgpConfig) -> tuple[np.ndarray, ...]:
    """Per-worker (q, b, beta, p) with -(1-q)b - beta*p == tau exactly."""
    n = tau.shape[0]
    loss = np.maximum(-tau, 0.0)
    b = np.full(n, config.benefit_level)
    beta = np.full(n, config.bargaining_share)
    one_minus_q = np.clip(config.nonemployment_share * loss / b, 0.0, 1.0)
    if config.bargaining_share > 0:
        p = (loss - one_minus_q * b) / beta
    else:
        # no rent channel: push the whole loss through non-employment
        one_minus_q = np.clip(loss / b, 0.0, 1.0)
        p = np.zeros(n)
        b = np.where(one_minus_q > 0, loss / one_minus_q, b)
        b = np.clip(b, 0.0, 1.0)
    q = 1.0 - one_minus_q
    # gains (tau > 0) are modelled as a negative lost surplus
    pos = tau > 0
    if pos.any():
        q[pos] = 1.0
        if config.bargaining_share > 0:
            p[pos] = -tau[pos] / beta[pos]
        else:
            beta[pos] = 1.0
            p[pos] = -tau[pos]
    return q, b, beta, p


def generate_panel(config: DgpConfig) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Generate the analysis table and its oracle.

    Returns ``(dataset, oracle)``. The dataset has one row per worker with
    treatment, covariates, and outcomes at horizons -3..+10; the oracle
    carries ``true_tau`` and its structural decomposition. Deterministic
    given ``config.seed``.
    """
    config.validate()
    seed = config.seed

    n_markets = config.n_markets
    n_loc = int(np.ceil(np.sqrt(n_markets)))
    n_ind = int(np.ceil(n_markets / n_loc))

    rng_loc = substream(seed, "dgp/locations")
    log_density = rng_loc.normal(3.0, 1.0, size=n_loc)
    z_dens = (log_density - log_density.mean()) / (log_density.std() or 1.0)
    local_unemployment = np.clip(
        0.08 - 0.012 * z_dens + 0.02 * rng_loc.normal(size=n_loc), 0.02, 0.25
    )

    rng_ind = substream(seed, "dgp/industries")
    manufacturing = (rng_ind.random(n_ind) < 0.4).astype(np.float64)
    industry_trend = np.clip(
        0.15 - 0.40 * manufacturing + 0.30 * rng_ind.normal(size=n_ind), -2.0, 2.0
    )

    market_loc = np.arange(n_markets) // n_ind
    market_ind = np.arange(n_markets) % n_ind

    rng_est = substream(seed, "dgp/establishments")
    e_lo, e_hi = _as_range(config.establishments_per_market)
    est_per_market = rng_est.integers(e_lo, e_hi + 1, size=n_markets)
    n_est = int(est_per_market.sum())
    if n_est == 0:
        raise ConfigError("configuration yields zero establishments")
    est_market = np.repeat(np.arange(n_markets), est_per_market)
    est_quality = rng_est.normal(size=n_est)  # mild within-establishment correlation

    w_lo, w_hi = _as_range(config.workers_per_establishment)
    workers_per_est = rng_est.integers(w_lo, w_hi + 1, size=n_est)
    n = int(workers_per_est.sum())
    if n == 0:
        raise ConfigError("configuration yields zero workers")

    est_of_worker = np.repeat(np.arange(n_est), workers_per_est)
    market_of_worker = est_market[est_of_worker]
    loc_of_worker = market_loc[market_of_worker]
    ind_of_worker = market_ind[market_of_worker]

    rng_w = substream(seed, "dgp/workers")
    age = np.clip(np.round(rng_w.normal(42.0, 9.0, size=n)), 24, 60)
    schooling = rng_w.choice(
        np.arange(9, 17),
        p=[0.12, 0.08, 0.30, 0.10, 0.10, 0.12, 0.12, 0.06],
        size=n,
    ).astype(np.float64)
    tenure = np.clip(3 + rng_w.geometric(0.35, size=n) - 1, 3, 10).astype(np.float64)
    experience = np.clip(tenure + rng_w.integers(0, 5, size=n), 3, 10).astype(np.float64)
    manuf_w = manufacturing[ind_of_worker]
    routine = np.clip(
        0.50
        + 0.12 * manuf_w
        - 0.025 * (schooling - 12.0)
        + 0.05 * est_quality[est_of_worker]
        + 0.12 * rng_w.normal(size=n),
        0.0,
        1.0,
    )
    female = (rng_w.random(n) < np.clip(0.42 - 0.15 * manuf_w, 0.0, 1.0)).astype(np.float64)

    cov = pd.DataFrame(
        {
            "age": age,
            "schooling": schooling,
            "tenure": tenure,
            "experience": experience,
            "routine": routine,
            "female": female,
            "manufacturing": manuf_w,
            "industry_trend": industry_trend[ind_of_worker],
            "log_density": log_density[loc_of_worker],
            "local_unemployment": local_unemployment[loc_of_worker],
        }
    )

    # establishment closure probability, possibly covariate dependent
    rng_t = substream(seed, "dgp/treatment")
    base_logit = np.log(config.closure_rate / (1.0 - config.closure_rate))
    logit = np.full(n_est, base_logit)
    if config.propensity_coefficients:
        est_means = cov.groupby(est_of_worker).mean()
        for name, coef in config.propensity_coefficients.items():
            col = est_means[name].to_numpy()
            sd = col.std()
            z = (col - col.mean()) / sd if sd > 0 else np.zeros(n_est)
            logit = logit + coef * z
        # keep the average closure probability anchored at closure_rate
        logit += base_logit - np.log(
            _sigmoid(logit).mean() / (1.0 - _sigmoid(logit).mean())
        )
    closed = rng_t.random(n_est) < _sigmoid(logit)
    treated = closed[est_of_worker].astype(np.int8)

    # true effect: recentered so the mean over displaced workers equals the
    # intercept exactly
    h = heterogeneity_index(cov, config)
    anchor = h[treated == 1].mean() if treated.any() else h.mean()
    true_tau = config.intercept + (h - anchor)

    h_sd = h.std()
    quality = (h - h.mean()) / h_sd if h_sd > 0 else np.zeros(n)
    slope = config.trajectory_slope * quality

    q_re, b_lvl, beta_sh, p_sur = _structural_params(true_tau, config)

    # outcome noise: establishment intercept plus idiosyncratic part, drawn
    # per horizon; noise_sd == 0 switches off every stochastic outcome
    # component, including the non-employment draws
    rng_y = substream(seed, "dgp/outcomes")
    sd_c = config.noise_sd * np.sqrt(config.cluster_noise_share)
    sd_i = config.noise_sd * np.sqrt(1.0 - config.cluster_noise_share)
    stochastic = config.noise_sd > 0

    def _noise() -> np.ndarray:
        if not stochastic:
            return np.zeros(n)
        u = rng_y.normal(scale=sd_c, size=n_est)[est_of_worker] if sd_c > 0 else 0.0
        e = rng_y.normal(scale=sd_i, size=n) if sd_i > 0 else 0.0
        return u + e

    def _persistence(k: int) -> float:
        if k == 0:
            return 0.4
        return (1.0 / 3.0) ** ((k - 1) / 9.0)

    data = {
        "worker_id": np.arange(1, n + 1, dtype=np.int64),
        "establishment_id": est_of_worker.astype(np.int64) + 1,
        "location_id": loc_of_worker.astype(np.int64),
        "industry_id": ind_of_worker.astype(np.int64),
        "event_year": np.full(n, config.event_year, dtype=np.int64),
        "treated": treated,
    }
    data.update({name: cov[name].to_numpy() for name in COVARIATES})

    is_t = treated == 1
    for k in PRE_HORIZONS:
        col = 1.0 + slope * (k + 1)
        if k != -1:
            col = col + _noise()
        data[f"y_m{-k}"] = col

    emp_cols: dict[int, np.ndarray] = {}
    for k in POST_HORIZONS:
        m_k = _persistence(k)
        cf = 1.0 + slope * (k + 1)
        mean_out = cf + m_k * true_tau * is_t
        if stochastic:
            p_ne = np.where(is_t, np.clip((1.0 - q_re) * m_k, 0.0, 1.0),
                            config.base_nonemployment)
            nonemployed = rng_y.random(n) < p_ne
            y = np.where(nonemployed, 0.0, mean_out / np.maximum(1.0 - p_ne, 1e-12) + _noise())
            emp = np.where(nonemployed, 0, (y >= config.employment_threshold).astype(np.int8))
        else:
            y = mean_out
            emp = (y >= config.employment_threshold).astype(np.int8)
        data[f"y_{k}" if k == 0 else f"y_p{k}"] = y
        if k >= 1:
            emp_cols[k] = emp
            data[f"emp_p{k}"] = emp

    # mobility at t+3 and dampened pass-through to disposable income at t+1
    g_loc = np.zeros(n)
    g_ind = np.zeros(n)
    for name, coef in config.effect_coefficients.items():
        block = COVARIATES[name]
        if block == "location":
            g_loc += coef * cov[name].to_numpy()
        elif block == "industry":
            g_ind += coef * cov[name].to_numpy()
    loss = np.maximum(-true_tau, 0.0)
    mean_loss = loss[is_t].mean() if is_t.any() else 0.0
    if stochastic:
        p_move = np.where(
            is_t,
            np.clip(0.012 - 0.8 * (g_loc - g_loc.mean()) + 0.08 * (true_tau - true_tau.mean()), 0.001, 0.8),
            0.010,
        )
        data["location_move_p3"] = (rng_y.random(n) < p_move).astype(np.float64)
        p_switch = np.where(
            is_t,
            np.clip(0.18 - 1.2 * (g_ind - g_ind.mean()), 0.02, 0.9),
            0.05,
        )
        ind_move = np.where(rng_y.random(n) < p_switch, 1.0, 0.0)
        ind_move = np.where(emp_cols[3] == 1, ind_move, np.nan)
        data["industry_move_p3"] = ind_move
    else:
        data["location_move_p3"] = np.zeros(n)
        data["industry_move_p3"] = np.zeros(n)

    insurance = np.clip(0.5 + config.insurance_gradient * (loss - mean_loss), 0.05, 0.95)
    data["disposable_p1"] = (
        0.8 * (1.0 + slope * 2.0) + true_tau * (1.0 - insurance) * is_t + 0.8 * _noise()
    )

    dataset = pd.DataFrame(data)

    oracle = pd.DataFrame(
        {
            "worker_id": data["worker_id"],
            "true_tau": true_tau,
            "reemployment_prob": q_re,
            "benefit_level": b_lvl,
            "bargaining_share": beta_sh,
            "job_surplus": p_sur,
            "trajectory_slope": slope,
        }
    )
    return dataset, oracle


def write_outputs(config: DgpConfig, out_dir: str | Path) -> tuple[Path, Path]:
    """CLI backend: write panel.csv and oracle.csv under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset, oracle = generate_panel(config)
    panel_path = out / "panel.csv"
    oracle_path = out / "oracle.csv"
    dataset.to_csv(panel_path, index=False)
    oracle.to_csv(oracle_path, index=False)
    return panel_path, oracle_path


def load_config(path: str | Path) -> DgpConfig:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return DgpConfig.from_dict(raw)
