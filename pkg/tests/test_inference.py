from __future__ import annotations

import numpy as np
import pytest

from panelcluster import (
    FitConfig,
    Grouping,
    PanelData,
    SmallGroupWarning,
    coef_table,
    fit,
    gfe_bands,
    gfe_covariance,
    group_ols,
    slope_covariance,
)
from panelcluster.inference import _stars

from conftest import make_grouped_panel


def _noiseless_fit(n_per_group=(6, 5, 4), t=8, seed=40):
    thetas = np.array([[3.0, -3.0], [1.0, 2.0], [-2.0, 0.5]])
    panel, truth = make_grouped_panel(n_per_group=n_per_group, t=t,
                                      thetas=thetas, noise=0.0, seed=seed)
    return panel, fit(panel, FitConfig(k=3, n_starts=20, seed=1))


class TestSlopeCovariance:
    def test_zero_residuals_zero_covariance(self):
        panel, result = _noiseless_fit()
        for g in (1, 2, 3):
            cov = slope_covariance(panel, result, g)
            assert np.abs(cov).max() < 1e-20

    def test_symmetric_psd(self):
        panel, truth = make_grouped_panel(seed=41, noise=1.0)
        result = fit(panel, FitConfig(k=3, n_starts=20, seed=2))
        for g in (1, 2, 3):
            cov = slope_covariance(panel, result, g)
            assert np.abs(cov - cov.T).max() < 1e-12
            assert np.linalg.eigvalsh(cov).min() >= -1e-12

    def test_iid_design_matches_sampling_variance(self):
        # Monte Carlo: empirical variance of theta-hat over replications
        # against the average estimated sandwich, i.i.d. N(0,1) design
        reps, n, t = 300, 40, 20
        est = np.empty((reps, 2))
        avg_cov = np.zeros((2, 2))
        grouping = Grouping(labels=np.ones(n, dtype=int), k=1)
        for r in range(reps):
            rng = np.random.default_rng(1000 + r)
            x = rng.standard_normal((n, t, 2))
            y = x[:, :, 0] - 0.5 * x[:, :, 1] + rng.standard_normal((n, t))
            panel = PanelData(y=y, x=x)
            res = fit(panel, FitConfig(k=1, n_starts=1, seed=0))
            est[r] = res.params.thetas[0]
            avg_cov += slope_covariance(panel, res, 1) / reps
        emp = est.var(axis=0, ddof=1)
        ratio = np.diag(avg_cov) / emp
        assert ratio[0] == pytest.approx(1.0, abs=0.3)
        assert ratio[1] == pytest.approx(1.0, abs=0.3)
        # scale check: diag approx sigma^2/(N T) = 1/800
        assert np.diag(avg_cov)[0] == pytest.approx(1 / 800, rel=0.3)

    def test_halves_when_t_doubles(self):
        diags = {}
        for t in (30, 60):
            rng = np.random.default_rng(7)
            x = rng.standard_normal((50, t, 2))
            y = x[:, :, 0] + rng.standard_normal((50, t))
            panel = PanelData(y=y, x=x)
            res = fit(panel, FitConfig(k=1, n_starts=1, seed=0))
            diags[t] = np.diag(slope_covariance(panel, res, 1)).mean()
        assert diags[30] / diags[60] == pytest.approx(2.0, abs=0.5)

    def test_single_unit_group_warns(self):
        thetas = np.array([[5.0, 0.0], [0.0, 5.0]])
        panel, truth = make_grouped_panel(n_per_group=(6, 1), t=10,
                                          thetas=thetas, noise=0.3, seed=42)
        result = fit(panel, FitConfig(k=2, n_starts=20, seed=3))
        small = int(np.argmin(result.grouping.sizes())) + 1
        with pytest.warns(SmallGroupWarning):
            slope_covariance(panel, result, small)

    def test_relabeling_invariance(self):
        panel, truth = make_grouped_panel(seed=43, noise=1.0)
        result = fit(panel, FitConfig(k=3, n_starts=20, seed=4))
        covs = {g: slope_covariance(panel, result, g) for g in (1, 2, 3)}
        # recompute from a relabeled copy of the same fit
        perm = np.array([2, 3, 1])
        relabeled = Grouping(labels=perm[result.grouping.labels - 1], k=3)
        params = group_ols(panel, relabeled)
        from dataclasses import replace

        shuffled = replace(result, grouping=relabeled, params=params)
        for g in (1, 2, 3):
            np.testing.assert_allclose(
                slope_covariance(panel, shuffled, perm[g - 1]), covs[g],
                rtol=1e-10,
            )


class TestGfeCovariance:
    def _gfe_fit(self, noise=0.7, seed=44, t=10, sizes=(8, 7, 6)):
        mus = np.vstack([np.linspace(0, 4, t), np.full(t, 2.0),
                         np.linspace(3, -1, t)])
        panel, truth = make_grouped_panel(n_per_group=sizes, t=t, seed=seed,
                                          noise=noise, mus=mus)
        return panel, fit(panel, FitConfig(k=3, gfe=True, n_starts=30, seed=5))

    def test_zero_residuals_zero_ses(self):
        t = 9
        mus = np.vstack([np.linspace(0, 4, t), np.full(t, 2.0),
                         np.linspace(3, -1, t)])
        panel, truth = make_grouped_panel(n_per_group=(5, 5, 5), t=t,
                                          noise=0.0, seed=45, mus=mus)
        result = fit(panel, FitConfig(k=3, gfe=True, n_starts=30, seed=6))
        bands = gfe_bands(panel, result)
        assert np.abs(bands.se).max() < 1e-10

    def test_demeaned_columns_centered(self):
        panel, result = self._gfe_fit()
        for g in (1, 2, 3):
            members = result.grouping.members(g)
            xd = panel.x[members] - panel.x[members].mean(axis=0)
            assert np.abs(xd.mean(axis=0)).max() < 1e-10
            cov, omega = gfe_covariance(panel, result, g)
            assert cov.shape == (2, 2)
            assert omega.shape == (panel.n_periods,)
            assert (omega >= 0).all()

    def test_path_se_matches_sampling_noise(self):
        # empirical sd of mu-hat across replications vs sd(eps)/sqrt(Nk)
        reps, t = 200, 6
        sizes = (12, 10, 8)
        mus = np.vstack([np.linspace(0, 4, t), np.full(t, 2.0),
                         np.linspace(3, -1, t)])
        noise = 0.5
        errors = []
        est_se = []
        for r in range(reps):
            panel, truth = make_grouped_panel(n_per_group=sizes, t=t,
                                              seed=3000 + r, noise=noise,
                                              mus=mus)
            res = fit(panel, FitConfig(k=3, gfe=True, n_starts=10, seed=7))
            from panelcluster import match_labels

            perm = match_labels(res.grouping, truth)
            src = int(np.where(perm == 1)[0][0]) + 1  # estimated label of G1
            errors.append(res.params.mus[src - 1] - mus[0])
            _, omega = gfe_covariance(panel, res, src)
            est_se.append(np.sqrt(omega / res.grouping.sizes()[src - 1]))
        emp_sd = np.vstack(errors).std(axis=0, ddof=1)
        mean_se = np.vstack(est_se).mean(axis=0)
        np.testing.assert_allclose(mean_se, emp_sd, rtol=0.35)
        np.testing.assert_allclose(
            mean_se.mean(), noise / np.sqrt(sizes[0]), rtol=0.25
        )

    def test_bands_se_identity(self):
        panel, result = self._gfe_fit()
        bands = gfe_bands(panel, result)
        sizes = result.grouping.sizes()
        for i, g in enumerate(bands.labels):
            _, omega = gfe_covariance(panel, result, g)
            np.testing.assert_allclose(bands.se[i],
                                       np.sqrt(omega / sizes[g - 1]))
            np.testing.assert_allclose(bands.mu_hat[i],
                                       result.params.mus[g - 1])


class TestCoefTable:
    def test_star_thresholds(self):
        assert _stars(2.0) == "**"
        assert _stars(1.7) == "*"
        assert _stars(2.6) == "***"
        assert _stars(1.5) == ""
        assert _stars(-3.0) == "***"

    def test_zero_se_sentinel(self):
        # sign-flip design with dyadic slopes solves exactly, so the
        # residuals and standard errors are exactly zero
        rng = np.random.default_rng(48)
        x = rng.choice([-1.0, 1.0], size=(6, 8, 1))
        y = 2.0 * x[:, :, 0]
        panel = PanelData(y=y, x=x)
        result = fit(panel, FitConfig(k=1, n_starts=1, seed=0))
        assert result.ssr == 0.0
        table = coef_table(panel, result)
        row = table.rows[0]
        assert row.theta_hat[0] == 2.0
        assert row.se[0] == 0.0
        assert row.t_stat[0] == np.inf
        assert row.star[0] == "***"

    def test_noiseless_ses_negligible(self):
        panel, result = _noiseless_fit()
        table = coef_table(panel, result)
        for row in table.rows:
            for j in range(2):
                assert row.se[j] < 1e-10
                assert row.star[j] == "***"

    def test_groups_ordered_by_descending_size(self):
        thetas = np.array([[6.0, 0.0], [0.0, 6.0], [-6.0, -6.0]])
        panel, truth = make_grouped_panel(n_per_group=(3, 320, 94), t=3,
                                          thetas=thetas, noise=0.1, seed=46)
        result = fit(panel, FitConfig(k=3, n_starts=20, seed=8))
        table = coef_table(panel, result)
        assert [row.n_k for row in table.rows] == [320, 94, 3]
        assert [row.group for row in table.rows] == [1, 2, 3]

    def test_t_stat_identity_and_frame(self):
        panel, truth = make_grouped_panel(seed=47, noise=1.0)
        result = fit(panel, FitConfig(k=3, n_starts=20, seed=9))
        table = coef_table(panel, result, regressor_names=("a", "b"))
        for row in table.rows:
            for j in range(2):
                if row.se[j] > 0:
                    assert row.t_stat[j] == pytest.approx(
                        row.theta_hat[j] / row.se[j]
                    )
        frame = table.to_frame()
        assert list(frame.columns) == [
            "group", "n_k", "regressor", "theta_hat", "se", "t_stat", "star"
        ]
        assert set(frame["regressor"]) == {"a", "b"}
        text = table.to_text()
        assert "(-" not in text.splitlines()[0]
        assert text.count("(") >= 6  # one parenthesized se per coefficient
