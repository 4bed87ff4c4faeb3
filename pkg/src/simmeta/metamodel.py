"""Metamodels over simulation results.

Aggregation of the estimate table into per-(condition, estimator) cells,
the four metamodel presets (random-slope MLMMs on individual results,
cluster-robust OLS and random-intercept MLMM on aggregates), prediction
intervals, empirical-Bayes ranges and conjoint-plot tables.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .mixed import (EbRecord, MixedFit, RandomSpec, average_reliability, blup_estimates,
                    fit_glmm_sqrt, fit_lmm, glmm_sqrt_at_theta, random_term, refit_at_theta)
from .regression import (DesignMatrix, RegressionFit, build_design, cluster_robust_vcov,
                         level_label, ols_fit)
from .study import ESTIMATORS, FACTORS

Z95 = float(stats.norm.ppf(0.975))
KEYS = ["condition_id", "estimator", *FACTORS]


class AggregationError(ValueError):
    pass


class SpecError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class Metric:
    name: str
    column: str | None  # estimate-table column, None for aggregate-only metrics
    scale: float = 1.0
    binary: bool = False
    subset: str | None = None  # "effect" (b1 > 0) or "null" (b1 == 0)


METRICS = {
    "power": Metric("power", "reject", 100.0, True, "effect"),
    "false_positive": Metric("false_positive", "reject", 100.0, True, "null"),
    "bias": Metric("bias", "error"),
    "sq_error": Metric("sq_error", "sq_error"),
    "coverage": Metric("coverage", "covered", 100.0, True),
    "se_est": Metric("se_est", "se_hat"),
    "true_se": Metric("true_se", None),
    "se_calibration": Metric("se_calibration", None),
}

# aggregate column holding each metric
AGG_COLUMN = {"power": "reject", "false_positive": "reject", "bias": "bias",
              "sq_error": "sq_error", "coverage": "coverage", "se_est": "se_est",
              "true_se": "true_se", "se_calibration": "se_calibration"}


def get_metric(name: str) -> Metric:
    try:
        return METRICS[name]
    except KeyError:
        raise SpecError(f"unknown metric {name!r}; choose from {sorted(METRICS)}") from None


def aggregate_results(estimates: pd.DataFrame) -> pd.DataFrame:
    """One row per (condition, estimator) with replication means and their
    Monte Carlo SEs.

    Binary metrics (reject, coverage) are scaled to percentages here. Failed
    (flagged) records are excluded; ``n_failed`` counts them and ``R`` counts
    the replications used.
    """
    missing_cols = [c for c in KEYS + ["ate_hat", "se_hat", "error", "sq_error", "reject",
                                       "covered"] if c not in estimates]
    if missing_cols:
        raise AggregationError(f"estimate table lacks columns {missing_cols}")
    conds = np.sort(estimates["condition_id"].unique())
    ests = [e for e in ESTIMATORS if e in set(estimates["estimator"])]
    present = set(zip(estimates["condition_id"], estimates["estimator"]))
    absent = [(int(c), e) for c in conds for e in ests if (c, e) not in present]
    if absent:
        raise AggregationError(f"missing (condition, estimator) cells: {absent[:20]}"
                               + (" ..." if len(absent) > 20 else ""))

    df = estimates.copy()
    failed = df["ate_hat"].isna()
    df["_failed"] = failed.astype(int)
    ok = df[~failed]
    g = ok.groupby(KEYS, sort=False)
    out = g.agg(R=("ate_hat", "size"),
                bias=("error", "mean"), bias_sd=("error", "std"),
                sq_error=("sq_error", "mean"), sq_sd=("sq_error", "std"),
                reject=("reject", "mean"), coverage=("covered", "mean"),
                se_est=("se_hat", "mean"), se_sd=("se_hat", "std"),
                true_se=("ate_hat", "std")).reset_index()
    nf = df.groupby(["condition_id", "estimator"])["_failed"].sum()
    out["n_failed"] = [int(nf.get((c, e), 0)) for c, e in zip(out["condition_id"],
                                                               out["estimator"])]
    R = out["R"].to_numpy(float)
    out["bias_mcse"] = out.pop("bias_sd") / np.sqrt(R)
    out["sq_error_mcse"] = out.pop("sq_sd") / np.sqrt(R)
    out["rmse"] = np.sqrt(out["sq_error"])
    for col in ("reject", "coverage"):
        p = out[col].to_numpy(float)
        out[col] = 100.0 * p
        out[f"{col}_mcse"] = 100.0 * np.sqrt(p * (1.0 - p) / R)
    se_sd = out.pop("se_sd").to_numpy(float)
    out["se_est_mcse"] = se_sd / np.sqrt(R)
    tse = out["true_se"].to_numpy(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out["true_se_mcse"] = tse / np.sqrt(2.0 * (R - 1.0))
        cal = out["se_est"].to_numpy(float) / tse
        out["se_calibration"] = cal
        out["se_calibration_mcse"] = np.abs(cal) * np.sqrt(
            (se_sd / out["se_est"].to_numpy(float)) ** 2 / R + 1.0 / (2.0 * (R - 1.0)))
    order = {e: i for i, e in enumerate(ESTIMATORS)}
    out["_o"] = out["estimator"].map(order)
    out = out.sort_values(["condition_id", "_o"], kind="mergesort").drop(columns="_o")
    cols = KEYS + ["R", "n_failed"]
    for m in ("bias", "sq_error", "rmse", "reject", "coverage", "se_est", "true_se",
              "se_calibration"):
        cols.append(m)
        if m != "rmse":
            cols.append(f"{m}_mcse")
    return out[cols].reset_index(drop=True)


# ---------------------------------------------------------------------------
# specifications

RANDOM_STRUCTURES = ("none", "ri_condition", "ri_nested", "rs")
WEIGHTS = ("none", "sqrt_n", "inv_mc_var")
SLOPES = ("estimator[adjusted]", "estimator[interacted]")


@dataclass(frozen=True)
class MetamodelSpec:
    metric: str
    level: str = "individual"  # or "aggregated"
    interactions: bool = False
    random: str = "rs"
    weights: str = "none"
    link: str = "identity"
    subset: str | None = None
    cluster: str | None = None  # cluster-robust covariance grouping (OLS only)
    model_id: int | None = None

    def __post_init__(self):
        m = get_metric(self.metric)
        if self.level not in ("individual", "aggregated"):
            raise SpecError(f"unknown data level {self.level!r}")
        if self.random not in RANDOM_STRUCTURES:
            raise SpecError(f"unknown random structure {self.random!r}")
        if self.weights not in WEIGHTS:
            raise SpecError(f"unknown weights option {self.weights!r}")
        if self.link not in ("identity", "sqrt"):
            raise SpecError(f"unknown link {self.link!r}")
        if self.random in ("rs", "ri_nested") and self.level != "individual":
            raise SpecError("dataset-level random effects and random slopes need "
                            "individual-level data; they are not identified on aggregates")
        if self.link == "sqrt" and self.metric != "sq_error":
            raise SpecError("the sqrt link is only available for sq_error")
        if self.link == "sqrt" and self.random == "none":
            raise SpecError("the sqrt link is implemented for mixed metamodels only")
        if m.column is None and self.level != "aggregated":
            raise SpecError(f"{self.metric} is defined per cell; use an aggregated preset")
        if self.weights == "inv_mc_var" and self.level != "aggregated":
            raise SpecError("inverse Monte Carlo variance weights need aggregated data")
        if self.cluster is not None and self.random != "none":
            raise SpecError("cluster-robust covariance applies to OLS metamodels")

    @property
    def is_mixed(self):
        return self.random != "none"


def preset_spec(model_id: int, metric: str, *, weights: str = "none", link: str | None = None,
                subset: str | None = None) -> MetamodelSpec:
    """The four presets: 1 = individual, main effects, three-level random
    slopes; 2 = as 1 plus estimator two-way interactions; 3 = aggregated,
    interactions, OLS with condition-clustered SEs; 4 = aggregated,
    interactions, random condition intercept."""
    if link is None:
        link = "identity"
    if model_id == 1:
        return MetamodelSpec(metric, "individual", False, "rs", weights, link, subset, None, 1)
    if model_id == 2:
        return MetamodelSpec(metric, "individual", True, "rs", weights, link, subset, None, 2)
    if model_id == 3:
        return MetamodelSpec(metric, "aggregated", True, "none", weights, link, subset,
                             "condition_id", 3)
    if model_id == 4:
        return MetamodelSpec(metric, "aggregated", True, "ri_condition", weights, link,
                             subset, None, 4)
    raise SpecError(f"unknown preset {model_id!r}; presets are 1-4")


@dataclass
class MetamodelResult:
    spec: MetamodelSpec
    design: DesignMatrix
    data: pd.DataFrame
    y: np.ndarray
    weights: np.ndarray | None
    fit: RegressionFit | MixedFit

    @property
    def columns(self) -> list[str]:
        return list(self.design.columns)

    @property
    def coef(self) -> np.ndarray:
        return np.asarray(self.fit.coef)

    @property
    def cov(self) -> np.ndarray:
        if isinstance(self.fit, RegressionFit) and self.fit.robust_cov is not None:
            return self.fit.robust_cov
        return self.fit.cov

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    @property
    def is_mixed(self):
        return isinstance(self.fit, MixedFit)

    def coef_of(self, label):
        return float(self.coef[self.columns.index(label)])

    def se_of(self, label):
        return float(self.se[self.columns.index(label)])

    def coef_table(self) -> pd.DataFrame:
        z = self.coef / self.se
        return pd.DataFrame({"term": self.columns, "estimate": self.coef, "se": self.se,
                             "z": z, "p": 2.0 * stats.norm.sf(np.abs(z))})

    def psi2(self, effect: str) -> float:
        """Between-condition variance of ``effect`` (0 without that random term)."""
        if not self.is_mixed or "condition_id" not in self.fit.group_names:
            return 0.0
        names = self.fit.group_names["condition_id"]
        return self.fit.variance("condition_id", effect) if effect in names else 0.0

    @property
    def n_clusters(self) -> int | None:
        return self.fit.n_clusters if isinstance(self.fit, RegressionFit) else None


def apply_subset(df: pd.DataFrame, metric: Metric, subset: str | None) -> pd.DataFrame:
    out = df
    if subset:
        try:
            out = out.query(subset)
        except Exception as exc:
            raise SpecError(f"cannot apply subset {subset!r}: {exc}") from exc
    if metric.subset == "effect":
        if subset and (out["b1"] == 0).any():
            raise SpecError(f"{metric.name} needs b1 > 0 rows; subset {subset!r} keeps b1 == 0")
        out = out[out["b1"] > 0]
    elif metric.subset == "null":
        if subset and (out["b1"] != 0).any():
            raise SpecError(f"{metric.name} needs b1 == 0 rows; subset {subset!r} keeps b1 != 0")
        out = out[out["b1"] == 0]
    n_cond = out["condition_id"].nunique()
    if n_cond < 2:
        raise SpecError(f"subset leaves {n_cond} condition(s); at least 2 are required")
    return out.reset_index(drop=True)


def metamodel_design(data: pd.DataFrame, interactions: bool) -> DesignMatrix:
    """Estimator plus every simulation factor that varies in ``data``."""
    factors = ["estimator"] + [f for f in FACTORS if data[f].nunique() > 1]
    levels = {"estimator": [e for e in ESTIMATORS if e in set(data["estimator"])]}
    return build_design(data, factors, focal="estimator", interact=interactions, levels=levels)


def _weights(spec: MetamodelSpec, data: pd.DataFrame, metric: Metric):
    if spec.weights == "none":
        return None
    if spec.weights == "sqrt_n":
        return np.sqrt(data["n"].to_numpy(float))
    col = AGG_COLUMN[spec.metric]
    if metric.binary:
        R = data["R"].to_numpy(float)
        k = data[col].to_numpy(float) / 100.0 * R
        p = (k + 0.5) / (R + 1.0)
        var = 1e4 * p * (1.0 - p) / R
    else:
        var = data[f"{col}_mcse"].to_numpy(float) ** 2
    if np.any(~(var > 0)):
        raise SpecError("some cells have zero Monte Carlo variance; inverse-variance "
                        "weights are undefined")
    return 1.0 / var


def prepare(spec: MetamodelSpec, estimates: pd.DataFrame | None = None,
            aggregates: pd.DataFrame | None = None):
    """Subset the data ``spec`` refers to and return (data, y, weights, design)."""
    metric = get_metric(spec.metric)
    if spec.level == "aggregated":
        if aggregates is None:
            if estimates is None:
                raise SpecError("aggregated presets need estimates or aggregates")
            aggregates = aggregate_results(estimates)
        data = apply_subset(aggregates, metric, spec.subset)
        y = data[AGG_COLUMN[spec.metric]].to_numpy(float)
    else:
        if estimates is None:
            raise SpecError("individual-level presets need the estimate table")
        data = apply_subset(estimates, metric, spec.subset)
        data = data[data["ate_hat"].notna()].reset_index(drop=True)
        y = data[metric.column].to_numpy(float) * metric.scale
    if not np.all(np.isfinite(y)):
        raise SpecError(f"{spec.metric} has non-finite values in the selected data")
    design = metamodel_design(data, spec.interactions)
    return data, y, _weights(spec, data, metric), design


def random_structure(spec: MetamodelSpec, data: pd.DataFrame, design: DesignMatrix) -> RandomSpec:
    if spec.random == "ri_condition":
        return RandomSpec([random_term(data, "condition_id")])
    if spec.random == "ri_nested":
        return RandomSpec([random_term(data, "dataset_id"), random_term(data, "condition_id")])
    slopes = [s for s in SLOPES if s in design.columns]
    return RandomSpec([random_term(data, "dataset_id"),
                       random_term(data, "condition_id", slopes, design)])


def fit_spec(spec: MetamodelSpec, estimates: pd.DataFrame | None = None,
             aggregates: pd.DataFrame | None = None, *, start=None,
             max_evals: int = 5000) -> MetamodelResult:
    data, y, w, design = prepare(spec, estimates, aggregates)
    if not spec.is_mixed:
        fit = ols_fit(design, y, w)
        if spec.cluster:
            cluster_robust_vcov(fit, data[spec.cluster].to_numpy())
        return MetamodelResult(spec, design, data, y, w, fit)
    random = random_structure(spec, data, design)
    if spec.link == "sqrt":
        fit = fit_glmm_sqrt(design, random, y, prior_weights=w, start=start,
                            max_evals=max_evals)
    else:
        fit = fit_lmm(design, random, y, w, start=start, max_evals=max_evals)
    return MetamodelResult(spec, design, data, y, w, fit)


def fit_spec_at(spec: MetamodelSpec, theta, estimates: pd.DataFrame | None = None,
                aggregates: pd.DataFrame | None = None) -> MetamodelResult:
    """Rebuild a fitted metamodel at stored variance parameters, skipping the
    optimiser (used to recompute EB estimates from a saved fit)."""
    if not spec.is_mixed:
        return fit_spec(spec, estimates, aggregates)
    data, y, w, design = prepare(spec, estimates, aggregates)
    random = random_structure(spec, data, design)
    if spec.link == "sqrt":
        fit = glmm_sqrt_at_theta(design, random, y, theta, prior_weights=w)
    else:
        fit = refit_at_theta(design, random, y, theta, w)
    return MetamodelResult(spec, design, data, y, w, fit)


def build_preset(model_id: int, metric: str, estimates: pd.DataFrame | None = None,
                 aggregates: pd.DataFrame | None = None, *, weights: str = "none",
                 link: str | None = None, subset: str | None = None) -> MetamodelResult:
    return fit_spec(preset_spec(model_id, metric, weights=weights, link=link, subset=subset),
                    estimates, aggregates)


# ---------------------------------------------------------------------------
# intervals, EB ranges, conjoint tables

def prediction_interval(effect: float, var_effect: float, psi2: float) -> tuple[float, float]:
    """effect +/- 1.96 sqrt(psi2 + var_effect): where the effect may fall in a
    new condition drawn from the same population of conditions."""
    if not (var_effect >= 0 and psi2 >= 0):
        raise ValueError("var_effect and psi2 must be non-negative")
    h = Z95 * math.sqrt(psi2 + var_effect)
    return effect - h, effect + h


def eb_records(result: MetamodelResult) -> list[EbRecord]:
    if not result.is_mixed:
        raise SpecError("empirical Bayes estimates need a mixed metamodel")
    return blup_estimates(result.fit, "condition_id")


def reliability(result: MetamodelResult, eb: Sequence[EbRecord] | None = None) -> dict:
    eb = eb_records(result) if eb is None else eb
    names = result.fit.group_names["condition_id"]
    return {nm: average_reliability(eb, nm) for nm in names}


def eb_inner_range(eb: Iterable[EbRecord], effect: str,
                   where: Callable[[EbRecord], bool] | Iterable | None = None,
                   base: float | None = None, coverage: float = 0.95) -> tuple[float, float]:
    """Inner ``coverage`` range (type-7 quantiles) of composed per-condition
    effects. ``where`` is a predicate or a collection of condition levels;
    ``base`` replaces the fixed part stored on the records."""
    recs = [r for r in eb if r.effect == effect]
    if where is not None:
        if callable(where):
            recs = [r for r in recs if where(r)]
        else:
            keep = set(where)
            recs = [r for r in recs if r.level in keep]
    if len(recs) < 2:
        raise ValueError(f"EB range needs at least 2 records for {effect!r}, got {len(recs)}")
    vals = np.array([(r.composed if base is None else base + r.deviation) for r in recs])
    a = (1.0 - coverage) / 2.0
    lo, hi = np.quantile(vals, [a, 1.0 - a])
    return float(lo), float(hi)


@dataclass
class ConjointRow:
    metric: str
    estimator: str
    factor: str
    level: float
    effect: float
    se: float
    ci_lo: float
    ci_hi: float
    eb_lo: float
    eb_hi: float


CONJOINT_COLUMNS = [f.name for f in ConjointRow.__dataclass_fields__.values()]


def facet_contrast(design: DesignMatrix, estimator: str, factor: str, level) -> np.ndarray:
    """Weights c such that c'beta is the estimator effect at ``factor=level``
    with every other factor at its reference."""
    c = np.zeros(len(design.columns))
    main = f"estimator[{estimator}]"
    if main not in design.columns:
        raise SpecError(f"estimator {estimator!r} is the reference or absent")
    c[design.column_index(main)] = 1.0
    if factor not in design.levels:
        raise SpecError(f"facet {factor!r} is not in the fitted model")
    lv = design.levels[factor]
    if level not in lv:
        raise SpecError(f"{factor!r} has no level {level!r}")
    if level != lv[0]:
        if factor not in design.interact:
            raise SpecError(f"the fit has no estimator x {factor} interaction")
        c[design.column_index(f"{main}:{level_label(factor, level)}")] = 1.0
    return c


def condition_contrasts(design: DesignMatrix, data: pd.DataFrame, estimator: str):
    """Per-condition contrast rows for the estimator effect, keyed by condition id."""
    conds = data.drop_duplicates("condition_id")
    out = {}
    for _, row in conds.iterrows():
        c = np.zeros(len(design.columns))
        main = f"estimator[{estimator}]"
        c[design.column_index(main)] = 1.0
        for f in design.interact:
            lvl = row[f]
            if lvl != design.levels[f][0]:
                c[design.column_index(f"{main}:{level_label(f, lvl)}")] = 1.0
        out[row["condition_id"]] = c
    return out


def conjoint_table(result: MetamodelResult, eb: Sequence[EbRecord] | None = None,
                   facets: Sequence[str] | None = None,
                   estimators: Sequence[str] = ("adjusted", "interacted"),
                   composition: str = "reference") -> pd.DataFrame:
    """Estimator effects per facet level with delta-method 95% CIs and EB
    inner-95% ranges over the conditions at that level.

    ``composition="reference"`` evaluates the effect with every other factor
    at its reference level and composes EB ranges from that fixed part.
    ``"marginal"`` averages the per-condition fixed effect over the
    conditions at the facet level, and composes each condition's EB effect
    from its own fixed part. EB ranges are NaN when the estimator effect has
    no random slope.
    """
    if composition not in ("reference", "marginal"):
        raise SpecError(f"unknown composition {composition!r}")
    design = result.design
    facets = [f for f in FACTORS if f in design.levels] if facets is None else list(facets)
    for f in facets:
        if f not in design.levels:
            raise SpecError(f"facet {f!r} is not in the fitted model")
    if eb is None and result.is_mixed:
        eb = eb_records(result)
    cond_level = result.data.drop_duplicates("condition_id").set_index("condition_id")
    rows = []
    beta, V = result.coef, result.cov
    for est in estimators:
        slope = f"estimator[{est}]"
        has_slope = eb is not None and any(r.effect == slope for r in eb)
        per_cond = (condition_contrasts(design, result.data, est)
                    if composition == "marginal" else None)
        dev = {r.level: r.deviation for r in eb if r.effect == slope} if has_slope else {}
        for f in facets:
            for lvl in design.levels[f]:
                conds = cond_level.index[cond_level[f] == lvl].tolist()
                if composition == "reference":
                    c = facet_contrast(design, est, f, lvl)
                else:
                    c = np.mean([per_cond[k] for k in conds], axis=0)
                eff = float(c @ beta)
                se = float(math.sqrt(max(c @ V @ c, 0.0)))
                lo = hi = float("nan")
                if has_slope and composition == "reference":
                    lo, hi = eb_inner_range(eb, slope, where=set(conds), base=eff)
                elif has_slope:
                    vals = np.array([per_cond[k] @ beta + dev[k] for k in conds])
                    if vals.size < 2:
                        raise ValueError(f"EB range needs at least 2 conditions at {f}={lvl}")
                    lo, hi = (float(q) for q in np.quantile(vals, [0.025, 0.975]))
                rows.append(ConjointRow(result.spec.metric, est, f, float(lvl), eff, se,
                                        eff - Z95 * se, eff + Z95 * se, lo, hi))
    return pd.DataFrame([asdict(r) for r in rows], columns=CONJOINT_COLUMNS)


def link_scale_effects(result: MetamodelResult,
                       estimators: Sequence[str] = ("adjusted", "interacted")) -> pd.DataFrame:
    """Effects of a sqrt-link fit on the RMSE and MSE scales.

    The linear predictor of a sqrt link on squared errors is the RMSE, so
    coefficients are RMSE-scale effects as they stand. MSE-scale effects at
    the reference condition are (b0 + b)^2 - b0^2 with delta-method SEs.
    """
    if result.spec.link != "sqrt":
        raise SpecError("link-scale effects apply to sqrt-link fits")
    cols, beta, V = result.columns, result.coef, result.cov
    rows = []
    i0 = cols.index("(Intercept)")
    for j, term in enumerate(cols):
        row = dict(term=term, rmse_effect=beta[j], rmse_se=math.sqrt(V[j, j]),
                   mse_effect=np.nan, mse_se=np.nan)
        if term != "(Intercept)":
            b0, b = beta[i0], beta[j]
            g = np.zeros(len(cols))
            g[i0] = 2.0 * b
            g[j] = 2.0 * (b0 + b)
            row["mse_effect"] = (b0 + b) ** 2 - b0 ** 2
            row["mse_se"] = math.sqrt(max(g @ V @ g, 0.0))
        rows.append(row)
    return pd.DataFrame(rows)
