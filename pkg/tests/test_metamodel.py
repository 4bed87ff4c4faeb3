import math
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from simmeta.metamodel import (AggregationError, MetamodelResult, MetamodelSpec, SpecError,
                               Z95, aggregate_results, build_preset, conjoint_table,
                               eb_inner_range, eb_records, facet_contrast, fit_spec,
                               fit_spec_at, link_scale_effects, prediction_interval, prepare,
                               preset_spec, random_structure, reliability)
from simmeta.mixed import EbRecord, fit_lmm, refit_at_theta
from simmeta.regression import build_design, cluster_robust_vcov, ols_fit
from simmeta.study import expand_grid, run_study
from conftest import SMALL_GRID


@pytest.fixture(scope="module")
def reference_grid_estimates():
    grid = dict(n=[100, 300, 500], b1=[0, 0.2, 0.4], prop_treated=[0.5, 0.7, 0.9],
                b2=[0.3, 0.5, 0.7], b3=[0, 0.25, 0.5])
    return run_study(expand_grid(grid), 2, 3)


@pytest.fixture(scope="module")
def small_aggregates(small_estimates):
    return aggregate_results(small_estimates)


class TestAggregate:
    def test_reference_scale(self, reference_grid_estimates):
        agg = aggregate_results(reference_grid_estimates)
        assert len(agg) == 729
        assert (agg["b1"] > 0).sum() == 486
        assert (agg["R"] == 2).all() and (agg["n_failed"] == 0).all()

    def test_all_rejections(self, small_estimates):
        df = small_estimates.copy()
        cell = (df["condition_id"] == 5) & (df["estimator"] == "adjusted")
        df.loc[cell, "reject"] = 1.0
        row = aggregate_results(df).query("condition_id == 5 and estimator == 'adjusted'")
        assert row["reject"].item() == 100.0 and row["reject_mcse"].item() == 0.0

    def test_true_se_and_bias_oracles(self, small_estimates, small_aggregates):
        cell = small_estimates.query("condition_id == 7 and estimator == 'interacted'")
        row = small_aggregates.query("condition_id == 7 and estimator == 'interacted'")
        assert row["true_se"].item() == pytest.approx(np.std(cell["ate_hat"], ddof=1),
                                                      abs=1e-12)
        assert row["bias"].item() == pytest.approx(cell["error"].mean(), abs=1e-12)
        R = len(cell)
        p = cell["covered"].mean()
        assert row["coverage_mcse"].item() == pytest.approx(100 * math.sqrt(p * (1 - p) / R))
        assert row["rmse"].item() == pytest.approx(math.sqrt(cell["sq_error"].mean()))

    def test_missing_cell(self, small_estimates):
        df = small_estimates[~((small_estimates["condition_id"] == 3)
                               & (small_estimates["estimator"] == "adjusted"))]
        with pytest.raises(AggregationError, match="missing"):
            aggregate_results(df)

    def test_failed_records_are_excluded_and_counted(self, small_estimates):
        df = small_estimates.copy()
        i = df.index[(df["condition_id"] == 0) & (df["estimator"] == "unadjusted")][0]
        df.loc[i, ["ate_hat", "se_hat", "error", "sq_error"]] = np.nan
        row = aggregate_results(df).query("condition_id == 0 and estimator == 'unadjusted'")
        assert row["R"].item() == 14 and row["n_failed"].item() == 1


class TestSpecs:
    @pytest.mark.parametrize("kwargs", [
        dict(metric="bias", link="sqrt"),
        dict(metric="power", level="aggregated", random="rs"),
        dict(metric="true_se", level="individual", random="none"),
        dict(metric="power", weights="inv_mc_var"),
        dict(metric="power", cluster="condition_id"),
        dict(metric="sq_error", link="sqrt", random="none"),
        dict(metric="nonsense"),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(SpecError):
            MetamodelSpec(**kwargs)

    def test_unknown_preset(self):
        with pytest.raises(SpecError):
            preset_spec(5, "power")

    def test_presets(self):
        assert preset_spec(3, "power").cluster == "condition_id"
        assert preset_spec(4, "true_se").random == "ri_condition"
        assert preset_spec(2, "power").interactions and not preset_spec(1, "power").interactions

    def test_subset_too_small(self, small_estimates):
        with pytest.raises(SpecError, match="at least 2"):
            prepare(MetamodelSpec("power", subset="b1 == 0.3 and n == 40 and b2 == 0.3 "
                                                  "and b3 == 0"), small_estimates)

    def test_subset_conflicting_with_metric(self, small_estimates):
        with pytest.raises(SpecError, match="b1"):
            prepare(MetamodelSpec("power", subset="n == 40"), small_estimates)

    def test_power_rows_only_nonnull(self, small_estimates):
        data, y, w, design = prepare(preset_spec(1, "power"), small_estimates)
        assert (data["b1"] > 0).all() and set(np.unique(y)) <= {0.0, 100.0}
        assert "estimator[adjusted]" in design.columns

    def test_inverse_variance_weights_use_adjusted_proportion(self, small_aggregates):
        spec = MetamodelSpec("power", "aggregated", True, "none", "inv_mc_var")
        data, y, w, _ = prepare(spec, aggregates=small_aggregates)
        R = data["R"].to_numpy(float)
        p = (y / 100 * R + 0.5) / (R + 1)
        assert w == pytest.approx(R / (1e4 * p * (1 - p)))


class TestIntervals:
    def test_reference_example(self):
        lo, hi = prediction_interval(12.22, 0.83 ** 2, 101.01)
        assert hi - lo == pytest.approx(39.5, abs=0.05)

    def test_degenerate(self):
        assert prediction_interval(5.0, 0.0, 0.0) == (5.0, 5.0)

    def test_negative(self):
        with pytest.raises(ValueError):
            prediction_interval(1.0, -1.0, 1.0)

    @given(st.floats(-50, 50), st.floats(0, 10), st.floats(0, 100), st.floats(0, 100))
    def test_width_monotone_in_psi2(self, eff, v, a, b):
        lo1, hi1 = prediction_interval(eff, v, min(a, b))
        lo2, hi2 = prediction_interval(eff, v, max(a, b))
        assert hi2 - lo2 >= hi1 - lo1 - 1e-12
        assert (lo1 + hi1) / 2 == pytest.approx(eff)

    def test_type7_quantiles(self):
        vals = np.arange(1, 41) ** 2.0
        rng = np.random.default_rng(0)
        recs = [EbRecord("condition_id", i, "e", float(v) - 3.0, float(v), 0.1, 0.5)
                for i, v in enumerate(rng.permutation(vals))]
        lo, hi = eb_inner_range(recs, "e")
        # h = (N - 1) p: 0.975 -> x1 + 0.975 (x2 - x1); 38.025 -> x39 + 0.025 (x40 - x39)
        assert lo == pytest.approx(1 + 0.975 * 3, abs=1e-12)
        assert hi == pytest.approx(1521 + 0.025 * 79, abs=1e-12)
        lo_b, hi_b = eb_inner_range(recs, "e", base=0.0)
        assert (lo_b, hi_b) == pytest.approx((lo - 3, hi - 3), abs=1e-12)
        with pytest.raises(ValueError):
            eb_inner_range(recs[:1], "e")


class TestOlsMetamodels:
    def test_facet_contrast_matches_relevelled_refit(self, small_aggregates):
        res = build_preset(3, "power", aggregates=small_aggregates)
        table = conjoint_table(res, facets=["b2"], estimators=["adjusted"])
        row = table.query("factor == 'b2' and level == 0.6").iloc[0]
        relevel = build_design(res.data, list(res.design.levels), focal="estimator",
                               interact=True, levels={"estimator": res.design.levels["estimator"]},
                               reference_levels={"b2": 0.6})
        fit = ols_fit(relevel, res.y)
        cluster_robust_vcov(fit, res.data["condition_id"].to_numpy())
        j = relevel.column_index("estimator[adjusted]")
        assert row["effect"] == pytest.approx(fit.coef[j], abs=1e-8)
        assert row["se"] == pytest.approx(math.sqrt(fit.robust_cov[j, j]), abs=1e-8)
        assert row["ci_hi"] - row["ci_lo"] == pytest.approx(2 * Z95 * row["se"])
        assert math.isnan(row["eb_lo"])

    def test_facet_contrast_errors(self, small_aggregates):
        res = build_preset(3, "power", aggregates=small_aggregates)
        with pytest.raises(SpecError):
            facet_contrast(res.design, "unadjusted", "b2", 0.6)
        with pytest.raises(SpecError):
            facet_contrast(res.design, "adjusted", "b2", 0.9)
        main = fit_spec(MetamodelSpec("power", "aggregated", False, "none"),
                        aggregates=small_aggregates)
        with pytest.raises(SpecError, match="interaction"):
            facet_contrast(main.design, "adjusted", "b2", 0.6)

    def test_saturated_design_reproduces_cell_means(self, small_estimates, small_aggregates):
        sub = "n == 40 and b2 == 0.3 and b3 == 0"  # only b1 varies: 3 x 3 cells
        agg = fit_spec(MetamodelSpec("bias", "aggregated", True, "none", subset=sub),
                       aggregates=small_aggregates)
        ind = fit_spec(MetamodelSpec("bias", "individual", True, "none", subset=sub),
                       small_estimates)
        assert len(agg.coef) == 9
        assert agg.fit.fitted == pytest.approx(agg.y, abs=1e-12)
        assert ind.coef == pytest.approx(agg.coef, abs=1e-12)

    def test_clusters_reported(self, small_aggregates):
        res = build_preset(3, "power", aggregates=small_aggregates)
        assert res.n_clusters == 16


class TestMixedMetamodels:
    @pytest.fixture(scope="class")
    @staticmethod
    def model1(small_estimates):
        return build_preset(1, "power", small_estimates)

    def test_random_structure_shape(self, model1):
        assert model1.is_mixed
        assert model1.fit.group_names["condition_id"] == ["(Intercept)", "estimator[adjusted]",
                                                         "estimator[interacted]"]
        assert model1.fit.n_groups == {"dataset_id": 16 * 15, "condition_id": 16}

    def test_scaling_by_100(self, model1):
        data, y, w, design = prepare(model1.spec, model1.data)
        rs = random_structure(model1.spec, data, design)
        # theta is scale free, so at fixed theta the identity is exact
        fixed = refit_at_theta(design, rs, y / 100.0, model1.fit.theta)
        assert fixed.coef * 100 == pytest.approx(model1.coef, rel=1e-10, abs=1e-10)
        assert fixed.z == pytest.approx(model1.fit.z, rel=1e-10, abs=1e-10)
        # a fresh optimisation lands on the same optimum up to its tolerance
        small = fit_lmm(design, rs, y / 100.0)
        assert small.coef * 100 == pytest.approx(model1.coef, abs=1e-4)
        assert small.z == pytest.approx(model1.fit.z, abs=1e-4)

    def test_eb_and_reliability(self, model1):
        eb = eb_records(model1)
        assert len(eb) == 16 * 3
        rel = reliability(model1, eb)
        assert set(rel) == {"(Intercept)", "estimator[adjusted]", "estimator[interacted]"}
        assert all(0 <= v <= 1 for v in rel.values())

    def test_refit_at_stored_theta(self, model1, small_estimates):
        again = fit_spec_at(model1.spec, model1.fit.theta, small_estimates)
        assert again.coef == pytest.approx(model1.coef, abs=1e-10)
        a = [r.composed for r in eb_records(again)]
        b = [r.composed for r in eb_records(model1)]
        assert a == pytest.approx(b, abs=1e-10)

    def test_main_effects_fit_has_no_facet_effects(self, model1):
        with pytest.raises(SpecError, match="interaction"):
            conjoint_table(model1, facets=["n"])

    def test_conjoint_ranges(self, small_estimates):
        m2 = build_preset(2, "power", small_estimates)
        eb = eb_records(m2)
        ref = conjoint_table(m2, eb, facets=["n", "b2"]).set_index(["estimator", "factor",
                                                                     "level"])
        assert len(ref) == 2 * 4
        row = ref.loc[("adjusted", "n", 80.0)]
        base = m2.coef_of("estimator[adjusted]") + m2.coef_of("estimator[adjusted]:n[80]")
        assert row["effect"] == pytest.approx(base, abs=1e-12)
        conds = m2.data.loc[m2.data["n"] == 80, "condition_id"].unique()
        assert (row["eb_lo"], row["eb_hi"]) == pytest.approx(
            eb_inner_range(eb, "estimator[adjusted]", where=conds, base=base))
        marg = conjoint_table(m2, eb, facets=["n"], composition="marginal")
        assert len(marg) == 2 * 2 and (marg["eb_lo"] <= marg["eb_hi"]).all()
        with pytest.raises(SpecError):
            conjoint_table(m2, eb, composition="median")

    def test_model4_collapses_to_ols_without_condition_variance(self, small_aggregates):
        spec3 = preset_spec(3, "bias")
        data, y, w, design = prepare(spec3, aggregates=small_aggregates)
        rng = np.random.default_rng(1)
        e = rng.normal(size=len(y))
        e -= pd.Series(e).groupby(data["condition_id"]).transform("mean").to_numpy()
        agg = small_aggregates.copy()
        fitted = design.matrix @ np.linspace(0.1, 1.0, design.matrix.shape[1])
        key = list(zip(data["condition_id"], data["estimator"]))
        new = dict(zip(key, fitted + e))
        agg["bias"] = [new.get(k, v) for k, v in zip(zip(agg["condition_id"], agg["estimator"]),
                                                      agg["bias"])]
        m4 = build_preset(4, "bias", aggregates=agg)
        m3 = build_preset(3, "bias", aggregates=agg)
        assert m4.fit.boundary and m4.psi2("(Intercept)") == 0.0
        assert m4.coef == pytest.approx(m3.coef, abs=1e-8)

    def test_models_share_point_estimates_on_balanced_cells(self, small_estimates,
                                                            small_aggregates):
        m3 = build_preset(3, "bias", aggregates=small_aggregates)
        m4 = build_preset(4, "bias", aggregates=small_aggregates)
        assert m4.coef == pytest.approx(m3.coef, abs=1e-8)


def test_link_scale_effects():
    class Stub:
        coef = np.array([0.5, -0.1])
        cov = np.array([[0.01, 0.002], [0.002, 0.004]])

    spec = MetamodelSpec("sq_error", link="sqrt")
    res = MetamodelResult(spec, build_design(pd.DataFrame({"estimator": ["unadjusted",
                                                                          "adjusted"]}),
                                             ["estimator"],
                                             levels={"estimator": ["unadjusted", "adjusted"]}),
                           None, None, None, Stub())
    out = link_scale_effects(res).set_index("term")
    assert out.loc["estimator[adjusted]", "rmse_effect"] == -0.1
    assert out.loc["estimator[adjusted]", "mse_effect"] == pytest.approx(0.4 ** 2 - 0.5 ** 2)
    g = np.array([2 * -0.1, 2 * 0.4])
    assert out.loc["estimator[adjusted]", "mse_se"] == pytest.approx(math.sqrt(g @ Stub.cov @ g))
    with pytest.raises(SpecError):
        link_scale_effects(MetamodelResult(MetamodelSpec("bias"), None, None, None, None, None))
