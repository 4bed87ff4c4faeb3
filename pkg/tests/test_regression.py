
import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from simmeta.regression import (InferenceError, LabelError, RankDeficiencyError, build_design,
                                cluster_robust_vcov, ols_fit)


def hc1_oracle(X, y):
    """HC1 by explicit formulas, independent of the library code path."""
    n, p = X.shape
    XtX_inv = np.linalg.inv(X.T @ X)
    e = y - X @ (XtX_inv @ X.T @ y)
    meat = (X * e[:, None] ** 2).T @ X
    return XtX_inv @ meat @ XtX_inv * n / (n - p)


def grid_rows():
    rows = []
    for est in ("unadjusted", "adjusted", "interacted"):
        for n in (100, 300, 500):
            for b1 in (0.0, 0.2, 0.4):
                for pt in (0.5, 0.7, 0.9):
                    for b2 in (0.3, 0.5, 0.7):
                        for b3 in (0.0, 0.25, 0.5):
                            rows.append(dict(estimator=est, n=n, b1=b1, prop_treated=pt,
                                             b2=b2, b3=b3))
    return pd.DataFrame(rows)


FACS = ["estimator", "n", "prop_treated", "b1", "b2", "b3"]
EST_LEVELS = {"estimator": ["unadjusted", "adjusted", "interacted"]}


class TestDesign:
    def test_main_effect_column_count(self):
        d = build_design(grid_rows(), FACS, levels=EST_LEVELS)
        assert d.shape[1] == 13
        assert d.columns[0] == "(Intercept)"
        assert "estimator[unadjusted]" not in d.columns

    def test_full_interaction_count(self):
        d = build_design(grid_rows(), FACS, focal="estimator", interact=True, levels=EST_LEVELS)
        assert d.shape[1] == 33

    def test_power_subset_interaction_count(self):
        rows = grid_rows().query("b1 > 0")
        d = build_design(rows, FACS, focal="estimator", interact=True, levels=EST_LEVELS)
        assert d.shape[1] == 30
        assert "estimator[adjusted]:b2[0.7]" in d.columns

    def test_interaction_order_factor_then_level_then_focal(self):
        d = build_design(grid_rows(), FACS, focal="estimator", interact=True, levels=EST_LEVELS)
        inter = [c for c in d.columns if ":" in c][:4]
        assert inter == ["estimator[adjusted]:n[300]", "estimator[interacted]:n[300]",
                         "estimator[adjusted]:n[500]", "estimator[interacted]:n[500]"]

    def test_single_level_factor_is_intercept_only_with_warning(self):
        rows = pd.DataFrame({"g": ["a", "a", "a"]})
        with pytest.warns(UserWarning, match="single level"):
            d = build_design(rows, ["g"])
        assert d.columns == ["(Intercept)"]

    def test_reference_level_override(self):
        rows = pd.DataFrame({"g": [1, 2, 3]})
        d = build_design(rows, ["g"], reference_levels={"g": 3})
        assert d.columns == ["(Intercept)", "g[1]", "g[2]"]

    def test_transform_reuses_layout_and_rejects_unseen_levels(self):
        rows = grid_rows()
        d = build_design(rows, FACS, focal="estimator", interact=True, levels=EST_LEVELS)
        sub = rows.iloc[[5, 100, 700]]
        t = d.transform(sub)
        assert t.columns == d.columns
        np.testing.assert_array_equal(t.matrix, d.matrix[[5, 100, 700]])
        bad = sub.copy()
        bad.loc[bad.index[0], "n"] = 1000
        with pytest.raises(LabelError):
            d.transform(bad)

    def test_missing_factor_column(self):
        with pytest.raises(KeyError):
            build_design(pd.DataFrame({"a": [1, 2]}), ["b"])


class TestOls:
    def test_intercept_only_mean(self):
        fit = ols_fit(np.ones((3, 1)), np.array([1.0, 2.0, 3.0]))
        assert fit.coef[0] == pytest.approx(2.0, abs=1e-12)

    def test_perfect_fit(self):
        x = np.arange(5.0)
        fit = ols_fit(np.column_stack([np.ones(5), x]), 2 * x)
        np.testing.assert_allclose(fit.coef, [0.0, 2.0], atol=1e-12)
        assert fit.sigma2 == pytest.approx(0.0, abs=1e-20)

    def test_matches_normal_equations(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(20, 4))
        y = rng.normal(size=20)
        fit = ols_fit(X, y)
        beta = np.linalg.solve(X.T @ X, X.T @ y)
        np.testing.assert_allclose(fit.coef, beta, atol=1e-8)
        s2 = np.sum((y - X @ beta) ** 2) / 16
        np.testing.assert_allclose(fit.cov, s2 * np.linalg.inv(X.T @ X), atol=1e-8)

    def test_weighted_matches_scaled_normal_equations(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(30, 3))
        y = rng.normal(size=30)
        w = rng.uniform(0.2, 3.0, 30)
        fit = ols_fit(X, y, w)
        beta = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * y))
        np.testing.assert_allclose(fit.coef, beta, atol=1e-10)

    def test_rank_deficiency_names_columns(self):
        rows = pd.DataFrame({"a": [1, 2, 1, 2], "b": [1, 2, 1, 2]})
        d = build_design(rows, ["a", "b"])
        with pytest.raises(RankDeficiencyError) as info:
            ols_fit(d, np.arange(4.0))
        assert set(info.value.dependent) & {"a[2]", "b[2]"}

    def test_constant_covariate_is_rank_deficient(self):
        X = np.column_stack([np.ones(6), [0, 0, 0, 1, 1, 1], np.full(6, 2.0)])
        with pytest.raises(RankDeficiencyError):
            ols_fit(X, np.arange(6.0))

    def test_bad_weights(self):
        with pytest.raises(ValueError):
            ols_fit(np.ones((3, 1)), np.ones(3), np.array([1.0, 0.0, 1.0]))


class TestClusterRobust:
    def test_singleton_clusters_equal_hc1(self):
        rng = np.random.default_rng(2)
        X = np.column_stack([np.ones(40), rng.normal(size=(40, 2))])
        y = X @ [1, 2, 3] + rng.normal(size=40) * (1 + np.abs(X[:, 1]))
        fit = ols_fit(X, y)
        V = cluster_robust_vcov(fit, np.arange(40))
        np.testing.assert_allclose(V, hc1_oracle(X, y), rtol=1e-10, atol=1e-14)
        assert fit.robust_type == "CR1" and fit.n_clusters == 40

    def test_zero_residuals_zero_covariance(self):
        X = np.column_stack([np.ones(6), np.arange(6.0)])
        fit = ols_fit(X, X @ [1.0, 2.0])
        V = cluster_robust_vcov(fit, [0, 0, 1, 1, 2, 2])
        np.testing.assert_allclose(V, 0.0, atol=1e-20)

    def test_cluster_formula(self):
        rng = np.random.default_rng(3)
        g = np.repeat(np.arange(8), 5)
        X = np.column_stack([np.ones(40), rng.normal(size=40)])
        y = X @ [0.5, 1.0] + rng.normal(size=8)[g] + rng.normal(size=40)
        fit = ols_fit(X, y)
        V = cluster_robust_vcov(fit, g)
        e = fit.resid
        B = np.linalg.inv(X.T @ X)
        meat = sum(np.outer(X[g == k].T @ e[g == k], X[g == k].T @ e[g == k]) for k in range(8))
        expect = B @ meat @ B * (8 / 7) * (39 / 38)
        np.testing.assert_allclose(V, expect, rtol=1e-10)

    def test_single_cluster_is_inference_error(self):
        fit = ols_fit(np.column_stack([np.ones(4), np.arange(4.0)]), np.array([1.0, 3, 2, 5]))
        with pytest.raises(InferenceError):
            cluster_robust_vcov(fit, np.zeros(4))

    def test_empty_ids(self):
        fit = ols_fit(np.ones((3, 1)), np.ones(3))
        with pytest.raises(ValueError):
            cluster_robust_vcov(fit, [])


@st.composite
def regression_problem(draw):
    n = draw(st.integers(8, 40))
    p = draw(st.integers(1, 4))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    y = rng.normal(size=n) * draw(st.floats(0.1, 10))
    w = rng.uniform(0.1, 5.0, n)
    g = rng.integers(0, max(2, n // 3), n)
    g[:2] = [0, 1]
    return X, y, w, g


@settings(max_examples=60, deadline=None)
@given(regression_problem())
def test_unit_weights_equal_ols(prob):
    X, y, _, _ = prob
    a, b = ols_fit(X, y), ols_fit(X, y, np.ones(len(y)))
    np.testing.assert_allclose(a.coef, b.coef, rtol=0, atol=1e-12)
    np.testing.assert_allclose(a.cov, b.cov, rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(regression_problem())
def test_residuals_orthogonal_and_reconstruct(prob):
    X, y, w, _ = prob
    fit = ols_fit(X, y, w)
    assert np.max(np.abs(X.T @ (w * fit.resid))) < 1e-8 * max(1.0, np.abs(y).max() * len(y))
    np.testing.assert_allclose(fit.fitted + fit.resid, y, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(regression_problem())
def test_covariances_symmetric_psd(prob):
    X, y, w, g = prob
    fit = ols_fit(X, y, w)
    V = cluster_robust_vcov(fit, g)
    for M in (fit.cov, V):
        np.testing.assert_allclose(M, M.T, atol=1e-14 * max(1.0, np.abs(M).max()))
        assert np.linalg.eigvalsh(M).min() >= -1e-10 * max(1.0, np.abs(M).max())


@settings(max_examples=40, deadline=None)
@given(regression_problem(), st.integers(0, 2**32 - 1))
def test_row_permutation_invariance(prob, seed):
    X, y, w, g = prob
    perm = np.random.default_rng(seed).permutation(len(y))
    a, b = ols_fit(X, y, w), ols_fit(X[perm], y[perm], w[perm])
    Va, Vb = cluster_robust_vcov(a, g), cluster_robust_vcov(b, g[perm])
    scale = max(1.0, np.abs(a.coef).max())
    np.testing.assert_allclose(a.coef, b.coef, atol=1e-10 * scale)
    np.testing.assert_allclose(a.cov, b.cov, atol=1e-10 * max(1.0, np.abs(a.cov).max()))
    np.testing.assert_allclose(Va, Vb, atol=1e-10 * max(1.0, np.abs(Va).max()))
