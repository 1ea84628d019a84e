import numpy as np
import pandas as pd
import pytest

from displace import dgp
from displace.errors import DataError
from displace.evaluate import (
    TOC_GRID,
    aipw_score,
    blp_calibration,
    cluster_ols,
    event_time_ate,
    group_ate,
    insurance_degree,
    interaction_regressions,
    outcome_distribution,
    profile_quantiles,
    rate_qini,
    within_cell_quartiles,
)


def tiny_frame(y, w, clusters, **extra):
    n = len(y)
    df = pd.DataFrame({
        "worker_id": np.arange(1, n + 1),
        "establishment_id": np.asarray(clusters),
        "treated": np.asarray(w),
        "y_p1": np.asarray(y, dtype=float),
    })
    for k, v in extra.items():
        df[k] = v
    return df


class TestGroupAte:
    def test_two_by_two(self):
        df = tiny_frame([1.0, 1.0, 0.0, 0.0], [1, 1, 0, 0], [1, 1, 2, 2])
        (est,) = group_ate(df, np.zeros(4))
        assert est.ate == pytest.approx(1.0)
        assert est.n_treated == 2 and est.n_control == 2

    def test_single_arm_group_raises(self):
        df = tiny_frame([1.0, 0.5], [1, 1], [1, 2])
        with pytest.raises(DataError):
            group_ate(df, np.zeros(2))

    def test_partition_identity_with_equal_ratios(self):
        rng = np.random.default_rng(0)
        n = 400
        w = np.tile([1, 0, 0, 0], n // 4)
        groups = np.repeat([1, 2], n // 2)
        y = rng.normal(size=n) - 0.3 * w
        df = tiny_frame(y, w, np.arange(n))
        per_group = group_ate(df, groups)
        (overall,) = group_ate(df, np.zeros(n))
        weights = np.array([g.n_treated for g in per_group], dtype=float)
        combined = np.sum([g.ate * wt for g, wt in zip(per_group, weights)]) / weights.sum()
        assert overall.ate == pytest.approx(combined, abs=1e-12)

    def test_se_invariant_to_row_order(self):
        rng = np.random.default_rng(1)
        n = 300
        w = rng.integers(0, 2, n)
        y = rng.normal(size=n)
        cl = rng.integers(0, 30, n)
        df = tiny_frame(y, w, cl)
        (a,) = group_ate(df, np.zeros(n))
        perm = rng.permutation(n)
        (b,) = group_ate(df.iloc[perm].reset_index(drop=True), np.zeros(n))
        assert a.ate == b.ate and a.se_clustered == b.se_clustered

    def test_cr1_inflates(self):
        rng = np.random.default_rng(2)
        n = 200
        df = tiny_frame(rng.normal(size=n), rng.integers(0, 2, n), rng.integers(0, 10, n))
        (cr0,) = group_ate(df, np.zeros(n))
        (cr1,) = group_ate(df, np.zeros(n), cr1=True)
        assert cr1.se_clustered > cr0.se_clustered


class TestAipwScore:
    def test_plug_in(self):
        got = aipw_score(y=[1.0], w=[1.0], e_hat=[0.5], m_hat=[0.5], tau_hat=[0.0])
        assert got[0] == pytest.approx(1.0)

    def test_on_model_control_cancels(self):
        for tau in (-0.3, 0.0, 0.7):
            got = aipw_score(y=[0.4], w=[0.0], e_hat=[0.5], m_hat=[0.4], tau_hat=[tau])
            assert got[0] == pytest.approx(0.0, abs=1e-12)

    def test_unbiased_under_randomization(self):
        rng = np.random.default_rng(3)
        n = 50_000
        w = (rng.random(n) < 0.5).astype(float)
        x = rng.normal(size=n)
        tau0 = -0.25
        y = 0.3 * x + w * tau0 + rng.normal(size=n)
        gamma = aipw_score(y, w, np.full(n, 0.5), 0.3 * x + 0.5 * tau0, np.full(n, tau0))
        assert gamma.mean() == pytest.approx(tau0, abs=0.01)

    def test_null_mean_near_zero(self):
        rng = np.random.default_rng(4)
        n = 50_000
        w = (rng.random(n) < 0.5).astype(float)
        y = rng.normal(size=n)
        gamma = aipw_score(y, w, np.full(n, 0.5), np.zeros(n), np.zeros(n))
        assert abs(gamma.mean()) < 0.02

    def test_unclipped_propensity_rejected(self):
        with pytest.raises(DataError):
            aipw_score([1.0], [1.0], [1.0], [0.0], [0.0])


def randomized_world(seed, n_clusters=800, per=8):
    rng = np.random.default_rng(seed)
    clusters = np.repeat(np.arange(n_clusters), per)
    n = len(clusters)
    x = rng.normal(size=n)
    tau = -0.25 + 0.15 * x
    w = (rng.random(n_clusters) < 0.5)[clusters].astype(float)
    noise = 0.4 * rng.normal(size=n) + 0.2 * rng.normal(size=n_clusters)[clusters]
    y = 0.8 + 0.2 * x + w * tau + noise
    m = 0.8 + 0.2 * x + 0.5 * tau
    return x, tau, w, y, clusters, w - 0.5, y - m


class TestBlpCalibration:
    def test_oracle_predictions_calibrated(self):
        _, tau, w, y, clusters, w_res, y_res = randomized_world(11, n_clusters=3000)
        res = blp_calibration(w_res, y_res, tau, clusters)
        assert 0.9 <= res.alpha <= 1.1
        assert 0.9 <= res.beta <= 1.1

    def test_doubled_predictions_halve_beta(self):
        _, tau, w, y, clusters, w_res, y_res = randomized_world(12, n_clusters=3000)
        res = blp_calibration(w_res, y_res, 2.0 * tau, clusters)
        assert res.beta == pytest.approx(0.5, abs=0.1)

    def test_degenerate_predictions_flagged(self):
        _, tau, w, y, clusters, w_res, y_res = randomized_world(13, n_clusters=200)
        res = blp_calibration(w_res, y_res, np.full(len(w_res), -0.3), clusters)
        assert res.degenerate and np.isnan(res.beta)

    def test_affine_reparameterization_matches_ols_oracle(self):
        _, tau, w, y, clusters, w_res, y_res = randomized_world(14, n_clusters=500)
        a, c = 2.5, 0.1
        res = blp_calibration(w_res, y_res, a * tau + c, clusters)
        # independent two-column least squares on the transformed design
        t2 = a * tau + c
        A = w_res * t2.mean()
        B = w_res * (t2 - t2.mean())
        X = np.column_stack([A, B])
        beta = np.linalg.lstsq(X, y_res, rcond=None)[0]
        assert res.alpha == pytest.approx(beta[0], abs=1e-9)
        assert res.beta == pytest.approx(beta[1], abs=1e-9)
        assert res.beta == pytest.approx(1.0 / a, abs=0.12)


class TestRateQini:
    def test_toc_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        n = 400
        scores = rng.normal(size=n)
        gamma = rng.normal(size=n)
        ids = np.arange(n)
        res = rate_qini(scores, gamma, np.arange(n) // 4, n_bootstrap=0, row_key=ids)
        order = np.argsort(scores, kind="stable")
        expected_qini = 0.0
        expected_autoc = 0.0
        for q in TOC_GRID:
            k = max(1, min(int(np.ceil(q * n)), n))
            toc = gamma[order][:k].mean() - gamma.mean()
            expected_qini += q * toc * 0.02
            expected_autoc += toc * 0.02
        assert res.qini == pytest.approx(expected_qini, abs=1e-10)
        assert res.autoc == pytest.approx(expected_autoc, abs=1e-10)

    def test_toc_at_one_is_zero(self):
        rng = np.random.default_rng(6)
        res = rate_qini(rng.normal(size=200), rng.normal(size=200),
                        np.arange(200) // 2, n_bootstrap=0)
        assert res.toc_curve[-1][0] == 1.0
        assert res.toc_curve[-1][1] == pytest.approx(0.0, abs=1e-12)

    def test_random_prioritization_within_two_se(self):
        rng = np.random.default_rng(7)
        n = 4000
        gamma = rng.normal(loc=-0.2, size=n)
        scores = rng.normal(size=n)  # unrelated to gamma
        res = rate_qini(scores, gamma, np.arange(n) // 8, n_bootstrap=200, seed=1)
        assert abs(res.qini) <= 2 * res.se

    def test_perfect_prioritization_of_losses_is_negative(self):
        rng = np.random.default_rng(8)
        n = 2000
        gamma = rng.normal(loc=-0.2, scale=0.5, size=n)
        res = rate_qini(gamma, gamma, np.arange(n) // 4, n_bootstrap=50, seed=2)
        assert res.qini < 0
        assert res.qini < -2 * res.se

    def test_constant_scores_flagged(self):
        res = rate_qini(np.zeros(100), np.random.default_rng(9).normal(size=100),
                        np.arange(100) // 2, n_bootstrap=10)
        assert res.untestable


class TestEventTime:
    def test_pre_period_balance_on_matched_data(self):
        from displace.matching import match_dataset

        cfg = dgp.default_config(seed=305)
        cfg.n_markets = 30
        cfg.establishments_per_market = (20, 26)
        cfg.noise_sd = 0.05
        ds, _ = dgp.generate_panel(cfg)
        matched, _, _ = match_dataset(ds, list(dgp.COVARIATES), k=3)
        estimates, _ = event_time_ate(matched, np.zeros(len(matched)),
                                      horizons=[-3, -2, -1])
        for k, est in estimates:
            assert abs(est.ate) < 0.01, f"pre-period {k} ATE {est.ate}"

    def test_effect_only_at_target_horizon(self):
        rng = np.random.default_rng(10)
        n = 800
        w = np.tile([1, 0], n // 2)
        df = pd.DataFrame({
            "worker_id": np.arange(n),
            "establishment_id": np.arange(n) // 4,
            "treated": w,
        })
        for k in range(-3, 11):
            from displace.evaluate import horizon_column
            col = horizon_column("y", k)
            df[col] = 1.0 + (0.0 if k != 1 else -0.5) * w
        estimates, traj = event_time_ate(df, np.zeros(n))
        for k, est in estimates:
            expected = -0.5 if k == 1 else 0.0
            assert est.ate == pytest.approx(expected, abs=1e-12)
        # trajectories are relative to the reference group at -1
        at_m1 = traj[(traj.horizon == -1)]
        assert np.allclose(at_m1["mean"], 0.0)

    def test_balanced_panel_restriction(self):
        df = pd.DataFrame({
            "worker_id": [1, 2, 3, 4],
            "establishment_id": [1, 1, 2, 2],
            "treated": [1, 0, 1, 0],
            "y_m1": [1.0, 1.0, 1.0, np.nan],
            "y_p1": [0.5, 1.0, 0.4, 1.0],
        })
        estimates, _ = event_time_ate(df, np.zeros(4), horizons=[-1, 1],
                                      balanced_only=True)
        for _, est in estimates:
            assert est.n_treated + est.n_control == 3


class TestInteractionRegressions:
    def test_independent_covariate_is_null(self):
        rng = np.random.default_rng(20)
        n = 20_000
        w = (rng.random(n) < 0.5).astype(float)
        v = rng.normal(size=n)
        y = 1.0 - 0.2 * w + 0.1 * rng.normal(size=n)
        df = tiny_frame(y, w, np.arange(n) // 5, v=v)
        res = interaction_regressions(df, ["v"])
        assert abs(res.interaction[0]) < 0.01

    def test_recovers_linear_modifier(self):
        rng = np.random.default_rng(21)
        n = 40_000
        w = (rng.random(n) < 0.5).astype(float)
        v = 2.0 + 3.0 * rng.normal(size=n)
        v_std = (v - v.mean()) / v.std()
        y = 0.5 + w * (-0.2 - 0.1 * v_std) + 0.3 * rng.normal(size=n)
        df = tiny_frame(y, w, np.arange(n) // 8, v=v)
        res = interaction_regressions(df, ["v"])
        assert res.interaction[0] == pytest.approx(-0.1, abs=0.02)

    def test_destandardization_scales_by_sd(self):
        rng = np.random.default_rng(22)
        n = 5000
        w = (rng.random(n) < 0.5).astype(float)
        v = 5.0 * rng.normal(size=n) + 1.0
        y = 0.5 + w * (-0.1 * v) + 0.1 * rng.normal(size=n)
        df = tiny_frame(y, w, np.arange(n) // 5, v=v)
        res_std = interaction_regressions(df, ["v"])
        # raw-scale regression computed directly
        X = np.column_stack([np.ones(n), w, v, w * v])
        raw = np.linalg.lstsq(X, y, rcond=None)[0][3]
        assert res_std.interaction[0] == pytest.approx(raw * v.std(), abs=1e-9)

    def test_dummies_untouched(self):
        rng = np.random.default_rng(23)
        n = 8000
        w = (rng.random(n) < 0.5).astype(float)
        d = (rng.random(n) < 0.3).astype(float)
        y = 0.5 + w * (-0.1 - 0.2 * d) + 0.1 * rng.normal(size=n)
        df = tiny_frame(y, w, np.arange(n) // 5, d=d)
        res = interaction_regressions(df, ["d"])
        assert res.kind[0] == "dummy"
        assert res.interaction[0] == pytest.approx(-0.2, abs=0.03)


class TestProfiles:
    def test_independent_covariate_flat(self):
        rng = np.random.default_rng(30)
        n = 8000
        df = pd.DataFrame({
            "worker_id": np.arange(n),
            "noise_cov": rng.normal(size=n),
        })
        groups = rng.integers(1, 5, n)
        prof = profile_quantiles(df, groups, ["noise_cov"]).set_index("covariate")
        assert abs(prof.loc["noise_cov", "bottom_minus_top"]) < 0.1

    def test_age_drives_quartiles_on_default_config(self, medium_world):
        _, ds, oracle, matched = medium_world
        from displace.crossfit import quantile_bins
        sub = matched.merge(oracle, on="worker_id")
        groups = quantile_bins(sub.true_tau.to_numpy(), sub.worker_id.to_numpy(), 4)
        prof = profile_quantiles(sub, groups, list(dgp.COVARIATES)).set_index("covariate")
        age_diff = prof.loc["age", "bottom_minus_top"]
        assert age_diff > 0
        cont = prof[prof.kind == "continuous"]
        assert prof.loc["age", "bottom_minus_top"] == cont.bottom_minus_top.abs().max()

    def test_within_cell_variant_removes_age_gradient(self, medium_world):
        _, ds, oracle, matched = medium_world
        from displace.crossfit import quantile_bins
        sub = matched.merge(oracle, on="worker_id")
        age_dec = quantile_bins(sub.age.to_numpy(), sub.worker_id.to_numpy(), 10)
        cells = sub.schooling.astype(int).to_numpy() * 100 + age_dec
        within = within_cell_quartiles(sub.true_tau.to_numpy(),
                                       sub.worker_id.to_numpy(), cells)
        prof = profile_quantiles(sub, within, ["age"]).set_index("covariate")
        assert abs(prof.loc["age", "bottom_minus_top"]) < 0.25


class TestInsuranceDegree:
    def test_no_insurance(self):
        assert insurance_degree(-0.4, -0.4) == 0.0

    def test_full_insurance(self):
        assert insurance_degree(-0.4, 0.0) == 1.0

    def test_zero_denominator(self):
        with pytest.raises(DataError):
            insurance_degree(0.0, -0.1)


class TestOutcomeDistribution:
    def test_identical_vectors_identical_histograms(self):
        y = np.concatenate([np.zeros(10), np.linspace(0.1, 1.9, 90)])
        df = tiny_frame(np.concatenate([y, y]), np.repeat([1, 0], 100),
                        np.arange(200))
        table = outcome_distribution(df)
        t = table[table.arm == "treated"].density.to_numpy()
        c = table[table.arm == "control"].density.to_numpy()
        np.testing.assert_array_equal(t, c)
        assert table.attrs["zero_mass"]["treated"] == table.attrs["zero_mass"]["control"]

    def test_employment_destruction_shows_in_zero_mass(self, medium_world):
        _, ds, _, matched = medium_world
        table = outcome_distribution(matched)
        assert table.attrs["zero_mass"]["treated"] > table.attrs["zero_mass"]["control"]

    def test_densities_account_for_zero_mass(self):
        y = np.concatenate([np.zeros(20), np.full(80, 0.5)])
        df = tiny_frame(np.concatenate([y, y]), np.repeat([1, 0], 100), np.arange(200))
        table = outcome_distribution(df)
        total = table[table.arm == "treated"].density.sum()
        assert total + table.attrs["zero_mass"]["treated"] == pytest.approx(1.0)
