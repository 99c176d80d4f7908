from __future__ import annotations

import itertools

import numpy as np
import pytest

from panelcluster import (
    EmptyGroupError,
    FitConfig,
    GroupParams,
    Grouping,
    InvalidSpecError,
    PanelData,
    SingularDesignError,
    assign,
    fit,
    group_ols,
    kmeans_once,
    match_labels,
    residuals,
)
from panelcluster.estimator import _draw_initial_labels

from conftest import THETA_STATIC, make_grouped_panel


# --- independent oracles -----------------------------------------------------


def pooled_ols_oracle(panel):
    """Textbook normal equations on the stacked data."""
    x = panel.x.reshape(-1, panel.n_regressors)
    y = panel.y.reshape(-1)
    return np.linalg.inv(x.T @ x) @ (x.T @ y)


def unit_ssr_oracle(panel, params, i, k):
    """Brute-force per-unit SSR under group k's parameters."""
    resid = panel.y[i] - panel.x[i] @ params.thetas[k - 1]
    if params.gfe:
        resid = resid - params.mus[k - 1]
    return float((resid ** 2).sum())


def exhaustive_min_ssr(panel, k):
    """Global minimum SSR over all k**N labelings, p=1 closed forms."""
    assert panel.n_regressors == 1
    x = panel.x[:, :, 0]
    a = (x * x).sum(axis=1)
    b = (x * panel.y).sum(axis=1)
    c = (panel.y * panel.y).sum(axis=1)
    best = np.inf
    for labels in itertools.product(range(k), repeat=panel.n_units):
        lab = np.asarray(labels)
        total = 0.0
        for g in range(k):
            sel = lab == g
            if not sel.any():
                continue
            sa, sb, sc = a[sel].sum(), b[sel].sum(), c[sel].sum()
            total += sc - sb * sb / sa
        if total < best:
            best = total
    return best


def match_oracle(est_labels, true_labels, k):
    """Minimum misclassification count over all label permutations."""
    best = None
    best_count = est_labels.size + 1
    for perm in itertools.permutations(range(1, k + 1)):
        mapped = np.asarray(perm)[est_labels - 1]
        count = int((mapped != true_labels).sum())
        if count < best_count:
            best_count = count
            best = perm
    return best, best_count


# --- group_ols ---------------------------------------------------------------


class TestGroupOls:
    def test_noiseless_interpolation(self):
        panel, truth = make_grouped_panel(n_per_group=(6,), t=10,
                                          thetas=np.array([[2.0, -1.5]]),
                                          noise=0.0, seed=1)
        params = group_ols(panel, truth)
        np.testing.assert_allclose(params.thetas, [[2.0, -1.5]], atol=1e-10)

    def test_single_group_matches_pooled_ols(self):
        panel, truth = make_grouped_panel(n_per_group=(8,), t=12, seed=2,
                                          thetas=np.array([[1.0, 2.0]]))
        params = group_ols(panel, truth)
        np.testing.assert_allclose(params.thetas[0], pooled_ols_oracle(panel),
                                   atol=1e-10)

    def test_gfe_paths_are_group_time_means(self):
        # pure path model: y_it = mu_kt exactly, so theta-hat = 0 and the
        # recovered path equals the group mean of y at each period
        rng = np.random.default_rng(3)
        t = 6
        mus = np.vstack([np.linspace(0, 4, t), np.full(t, 2.0)])
        labels = np.repeat([1, 2], 5)
        y = mus[labels - 1]
        x = rng.standard_normal((10, t, 2))
        panel = PanelData(y=y, x=x)
        truth = Grouping(labels=labels, k=2)
        params = group_ols(panel, truth, gfe=True)
        for g in (1, 2):
            members = truth.members(g)
            np.testing.assert_allclose(params.mus[g - 1],
                                       panel.y[members].mean(axis=0),
                                       atol=1e-10)

    def test_gfe_closed_form_identity(self):
        panel, truth = make_grouped_panel(n_per_group=(5, 7), t=9, seed=4,
                                          thetas=np.array([[1.0, 0.5],
                                                           [2.0, -1.0]]))
        params = group_ols(panel, truth, gfe=True)
        for g in (1, 2):
            members = truth.members(g)
            xbar = panel.x[members].mean(axis=0)
            ybar = panel.y[members].mean(axis=0)
            np.testing.assert_allclose(
                params.mus[g - 1], ybar - xbar @ params.thetas[g - 1],
                atol=1e-10,
            )

    def test_empty_group_rejected(self):
        panel, _ = make_grouped_panel(n_per_group=(4,), t=5, seed=5,
                                      thetas=np.array([[1.0, 1.0]]))
        grouping = Grouping(labels=np.ones(4, dtype=int), k=2)
        with pytest.raises(EmptyGroupError, match="group 2"):
            group_ols(panel, grouping)

    def test_singular_design_names_group(self):
        rng = np.random.default_rng(6)
        x1 = rng.standard_normal((4, 5, 1))
        x = np.concatenate([x1, 2.0 * x1], axis=2)  # collinear columns
        panel = PanelData(y=rng.standard_normal((4, 5)), x=x)
        grouping = Grouping(labels=np.ones(4, dtype=int), k=1)
        with pytest.raises(SingularDesignError, match="group 1"):
            group_ols(panel, grouping)

    def test_residual_orthogonality(self):
        panel, truth = make_grouped_panel(seed=7)
        params = group_ols(panel, truth)
        e = residuals(panel, truth, params)
        scale = np.abs(np.einsum("ntp,nt->p", panel.x, panel.y)).max()
        for g in range(1, 4):
            members = truth.members(g)
            moment = np.einsum("ntp,nt->p", panel.x[members], e[members])
            assert np.abs(moment).max() <= 1e-8 * scale


# --- assign ------------------------------------------------------------------


class TestAssign:
    def test_zero_noise_unit_goes_to_its_group(self):
        panel, truth = make_grouped_panel(noise=0.0, seed=8)
        params = GroupParams(thetas=THETA_STATIC)
        result = assign(panel, params)
        np.testing.assert_array_equal(result.labels, truth.labels)

    def test_tie_takes_smaller_label(self):
        panel, _ = make_grouped_panel(n_per_group=(5,), t=6, seed=9,
                                      thetas=np.array([[1.0, 1.0]]))
        params = GroupParams(thetas=np.array([[2.0, 0.5], [2.0, 0.5]]))
        result = assign(panel, params)
        assert (result.labels == 1).all()

    def test_matches_per_unit_enumeration(self):
        panel, _ = make_grouped_panel(n_per_group=(3, 2), t=7, seed=10,
                                      thetas=np.array([[1.0, 0.0],
                                                       [0.0, 1.0]]),
                                      noise=2.0)
        params = GroupParams(thetas=np.array([[0.8, 0.1], [0.2, 0.9]]))
        result = assign(panel, params)
        for i in range(panel.n_units):
            ssrs = [unit_ssr_oracle(panel, params, i, k) for k in (1, 2)]
            assert result.labels[i] == int(np.argmin(ssrs)) + 1


# --- kmeans_once -------------------------------------------------------------


class TestKmeansOnce:
    def test_fixed_point_returns_in_one_pass(self):
        panel, truth = make_grouped_panel(seed=11)
        config = FitConfig(k=3, n_starts=1, seed=0)
        ref = fit(panel, config)
        again = kmeans_once(panel, config, ref.grouping)
        assert again.iterations_used == 1
        np.testing.assert_array_equal(again.grouping.labels,
                                      ref.grouping.labels)

    def test_noiseless_recovers_from_swapped_init(self):
        panel, truth = make_grouped_panel(noise=0.0, seed=12)
        init = truth.labels.copy()
        init[0], init[10] = 2, 1  # swap one unit between groups 1 and 2
        result = kmeans_once(panel, FitConfig(k=3, seed=0),
                             Grouping(labels=init, k=3))
        assert result.ssr < 1e-16
        perm, count = match_oracle(result.grouping.labels, truth.labels, 3)
        assert count == 0

    def test_ssr_trace_monotone(self):
        panel, _ = make_grouped_panel(noise=3.0, seed=13)
        rng = np.random.default_rng(14)
        init = Grouping(labels=rng.integers(1, 4, panel.n_units), k=3)
        result = kmeans_once(panel, FitConfig(k=3, seed=0), init)
        seq = [v for pair in result.ssr_trace for v in pair]
        assert all(b <= a + 1e-9 * max(1.0, a) for a, b in zip(seq, seq[1:]))

    def test_empty_group_repair_keeps_groups_alive(self):
        # identical units: every assignment collapses to label 1, forcing
        # repeated repairs until the SSR plateau stops the iteration
        panel = PanelData(y=np.full((4, 3), 5.0), x=np.ones((4, 3, 1)))
        init = Grouping(labels=np.array([1, 2, 3, 1]), k=3)
        result = kmeans_once(panel, FitConfig(k=3, seed=0), init)
        assert result.n_repairs >= 2
        assert (result.grouping.sizes() >= 1).all()
        assert result.converged

    def test_unrepairable_init(self):
        panel = PanelData(y=np.ones((2, 3)), x=np.ones((2, 3, 1)))
        init = Grouping(labels=np.array([1, 1]), k=2)
        # repairable: largest group donates one unit
        result = kmeans_once(panel, FitConfig(k=2, seed=0), init)
        assert (result.grouping.sizes() >= 1).all()


# --- fit ---------------------------------------------------------------------


class TestFit:
    def test_single_start_equals_kmeans_once(self):
        panel, _ = make_grouped_panel(seed=15)
        config = FitConfig(k=3, n_starts=1, seed=77)
        whole = fit(panel, config)
        init = _draw_initial_labels(77, 3, 1, panel.n_units)[0] + 1
        once = kmeans_once(panel, config, Grouping(labels=init, k=3))
        assert whole.ssr == once.ssr
        np.testing.assert_array_equal(whole.grouping.labels,
                                      once.grouping.labels)
        np.testing.assert_array_equal(whole.params.thetas, once.params.thetas)

    def test_attains_exhaustive_minimum(self):
        rng = np.random.default_rng(16)
        thetas = np.array([[2.0], [-2.0]])
        labels = np.array([1, 1, 1, 2, 2, 2])
        x = rng.standard_normal((6, 20, 1))
        y = np.einsum("ntp,np->nt", x, thetas[labels - 1])
        y += 0.8 * rng.standard_normal((6, 20))
        panel = PanelData(y=y, x=x)
        oracle = exhaustive_min_ssr(panel, 2)
        result = fit(panel, FitConfig(k=2, n_starts=50, seed=4))
        assert result.ssr <= oracle * (1 + 1e-10) + 1e-12

    def test_deterministic_across_runs_and_jobs(self):
        panel, _ = make_grouped_panel(seed=17)
        config = FitConfig(k=3, n_starts=40, seed=123)
        a = fit(panel, config)
        b = fit(panel, config)
        c = fit(panel, config, jobs=2)
        for other in (b, c):
            assert other.ssr == a.ssr
            assert other.start_index_of_best == a.start_index_of_best
            np.testing.assert_array_equal(other.grouping.labels,
                                          a.grouping.labels)
            np.testing.assert_array_equal(other.params.thetas,
                                          a.params.thetas)

    def test_sigma2_definition(self):
        panel, _ = make_grouped_panel(seed=18)
        result = fit(panel, FitConfig(k=2, n_starts=10, seed=5))
        nt = panel.n_units * panel.n_periods
        assert result.sigma2_hat == result.ssr / nt

    def test_k_exceeding_n_rejected(self):
        panel, _ = make_grouped_panel(n_per_group=(2, 2), t=5, seed=19,
                                      thetas=np.array([[1.0, 0.0],
                                                       [0.0, 1.0]]))
        with pytest.raises(InvalidSpecError, match="exceeds"):
            fit(panel, FitConfig(k=5, n_starts=2, seed=0))

    def test_label_permutation_invariance(self):
        panel, _ = make_grouped_panel(seed=20)
        rng = np.random.default_rng(21)
        init = rng.integers(1, 4, panel.n_units)
        config = FitConfig(k=3, seed=0)
        base = kmeans_once(panel, config, Grouping(labels=init, k=3))
        perm = np.array([3, 1, 2])
        permuted = kmeans_once(panel, config,
                               Grouping(labels=perm[init - 1], k=3))
        assert np.isclose(base.ssr, permuted.ssr, rtol=1e-12)
        # identical partition as a set of sets
        parts = lambda g: frozenset(
            frozenset(np.flatnonzero(g.labels == lab))
            for lab in range(1, 4)
        )
        assert parts(base.grouping) == parts(permuted.grouping)

    def test_gfe_residual_means_vanish_per_group_period(self):
        t = 12
        mus = np.vstack([np.linspace(0, 3, t), np.full(t, 1.0),
                         np.linspace(2, -2, t)])
        panel, truth = make_grouped_panel(t=t, seed=22, mus=mus)
        result = fit(panel, FitConfig(k=3, gfe=True, n_starts=30, seed=9))
        e = residuals(panel, result.grouping, result.params)
        for g in range(1, 4):
            members = result.grouping.members(g)
            assert np.abs(e[members].mean(axis=0)).max() < 1e-8


# --- match_labels ------------------------------------------------------------


class TestMatchLabels:
    def test_identity(self):
        g = Grouping(labels=np.array([1, 2, 3, 1]), k=3)
        np.testing.assert_array_equal(match_labels(g, g), [1, 2, 3])

    def test_transposition(self):
        truth = Grouping(labels=np.array([1, 1, 2, 2, 3]), k=3)
        est = Grouping(labels=np.array([2, 2, 1, 1, 3]), k=3)
        perm = match_labels(est, truth)
        np.testing.assert_array_equal(perm, [2, 1, 3])
        mapped = perm[est.labels - 1]
        assert (mapped == truth.labels).all()

    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(23)
        for trial in range(20):
            est = rng.integers(1, 4, 12)
            true = rng.integers(1, 4, 12)
            perm = match_labels(Grouping(labels=est, k=3),
                                Grouping(labels=true, k=3))
            mapped = perm[est - 1]
            count = int((mapped != true).sum())
            _, oracle_count = match_oracle(est, true, 3)
            assert count == oracle_count

    def test_dimension_mismatch(self):
        a = Grouping(labels=np.array([1, 2]), k=2)
        b = Grouping(labels=np.array([1, 2, 1]), k=2)
        with pytest.raises(InvalidSpecError):
            match_labels(a, b)
        c = Grouping(labels=np.array([1, 2]), k=3)
        with pytest.raises(InvalidSpecError):
            match_labels(a, c)
