"""Factorial RCT simulation: grid expansion, data generation, the three
within-dataset ATE estimators, and per-estimate performance metrics."""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import special

from .regression import RankDeficiencyError, ols_fit

FACTORS = ("n", "b1", "prop_treated", "b2", "b3")
ESTIMATORS = ("unadjusted", "adjusted", "interacted")
ALPHA = 0.05
MAX_REDRAWS = 100
ALTERNATIVES = ("two-sided", "greater")

ESTIMATE_COLUMNS = [
    "condition_id", "dataset_id", "estimator", "n", "b1", "prop_treated", "b2", "b3",
    "ate_hat", "se_hat", "p_value", "ci_lo", "ci_hi", "error", "sq_error", "reject",
    "covered", "flag",
]


class ConfigurationError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class EstimationError(RuntimeError):
    def __init__(self, message, condition_id=None, dataset_id=None):
        super().__init__(message)
        self.condition_id = condition_id
        self.dataset_id = dataset_id


@dataclass(frozen=True)
class SimCondition:
    condition_id: int
    n: int
    b1: float
    prop_treated: float
    b2: float
    b3: float

    def __post_init__(self):
        validate_factor("n", self.n)
        validate_factor("prop_treated", self.prop_treated)
        validate_factor("b2", self.b2)
        if self.condition_id < 0:
            raise ConfigurationError("condition_id must be >= 0")


def validate_factor(name, value):
    bad = False
    if name == "n":
        bad = int(value) != value or value < 4
    elif name == "prop_treated":
        bad = not 0 < value < 1
    elif name == "b2":
        bad = not value ** 2 < 1
    elif name not in FACTORS:
        raise ConfigurationError(f"unknown factor {name!r}")
    if bad or not np.isfinite(value):
        raise ConfigurationError(f"invalid value {value!r} for factor {name!r}")


def expand_grid(factors: Mapping[str, Sequence[float]]) -> list[SimCondition]:
    """Cartesian product of the factor levels, row-major in FACTORS order
    (the last factor varies fastest)."""
    for name in factors:
        if name not in FACTORS:
            raise ConfigurationError(f"unknown factor {name!r}")
    missing = [f for f in FACTORS if f not in factors]
    if missing:
        raise ConfigurationError(f"missing factor(s) {missing}")
    levels = []
    for name in FACTORS:
        values = list(factors[name])
        if not values:
            raise ConfigurationError(f"factor {name!r} has no values")
        for v in values:
            validate_factor(name, v)
        levels.append(values)
    return [SimCondition(k, int(combo[0]), *map(float, combo[1:]))
            for k, combo in enumerate(itertools.product(*levels))]


def rng_for(seed: int, condition_id: int, replication: int) -> np.random.Generator:
    """Counter-based substream keyed by (seed, condition, replication)."""
    ss = np.random.SeedSequence(seed, spawn_key=(condition_id, replication))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class Dataset:
    condition_id: int
    replication: int
    y: np.ndarray
    t: np.ndarray
    x: np.ndarray

    @property
    def n(self):
        return self.y.size


def generate_dataset(cond: SimCondition, rng: np.random.Generator,
                     replication: int = 0) -> Dataset:
    """x ~ N(0,1), t ~ Bernoulli(p), y = b1 t + b2 x + b3 t x + e with
    e ~ N(0, 1 - b2^2), so the control-arm outcome has unit variance and
    corr(x, y | t=0) = b2. The treatment vector is redrawn if an arm is empty."""
    n = cond.n
    x = rng.standard_normal(n)
    for _ in range(MAX_REDRAWS):
        t = (rng.random(n) < cond.prop_treated).astype(float)
        k = t.sum()
        if 0 < k < n:
            break
    else:
        raise GenerationError(
            f"condition {cond.condition_id}: an arm stayed empty after {MAX_REDRAWS} draws")
    e = rng.normal(0.0, math.sqrt(1.0 - cond.b2 ** 2), n)
    y = cond.b1 * t + cond.b2 * x + cond.b3 * t * x + e
    return Dataset(cond.condition_id, replication, y, t, x)


@dataclass
class EstimateRecord:
    condition_id: int
    dataset_id: int
    estimator: str
    ate_hat: float
    se_hat: float
    p_value: float
    ci_lo: float
    ci_hi: float
    error: float = float("nan")
    sq_error: float = float("nan")
    reject: float = float("nan")
    covered: float = float("nan")
    se_est: float = float("nan")
    flag: str = ""


def estimator_design(d: Dataset, kind: str) -> np.ndarray:
    one = np.ones(d.n)
    if kind == "unadjusted":
        return np.column_stack([one, d.t])
    if kind == "adjusted":
        return np.column_stack([one, d.t, d.x])
    if kind == "interacted":
        xc = d.x - d.x.mean()
        return np.column_stack([one, d.t, xc, d.t * xc])
    raise ValueError(f"unknown estimator {kind!r}")


def fit_estimator(d: Dataset, kind: str, dataset_id: int | None = None,
                  alternative: str = "two-sided") -> EstimateRecord:
    """OLS of y on the estimator's design; the treatment coefficient is the ATE.

    Inference uses the t distribution on the residual df. ``alternative``
    selects the p-value (two-sided, or one-sided against ATE <= 0); the 95%
    CI is always two-sided.
    """
    if alternative not in ALTERNATIVES:
        raise ValueError(f"unknown alternative {alternative!r}")
    dataset_id = d.replication if dataset_id is None else dataset_id
    X = estimator_design(d, kind)
    try:
        fit = ols_fit(X, d.y)
    except RankDeficiencyError as exc:
        raise EstimationError(f"{kind} fit failed for condition {d.condition_id}, "
                              f"dataset {dataset_id}: {exc}", d.condition_id, dataset_id) from exc
    ate = float(fit.coef[1])
    se = float(math.sqrt(fit.cov[1, 1]))
    if not se > 0:
        raise EstimationError(f"{kind} fit for condition {d.condition_id}, dataset "
                              f"{dataset_id} has non-positive SE", d.condition_id, dataset_id)
    tstat = ate / se
    if alternative == "greater":
        p = float(special.stdtr(fit.df, -tstat))
    else:
        p = float(2.0 * special.stdtr(fit.df, -abs(tstat)))
    q = float(special.stdtrit(fit.df, 1.0 - ALPHA / 2))
    return EstimateRecord(d.condition_id, dataset_id, kind, ate, se, p, ate - q * se, ate + q * se)


def compute_metrics(rec: EstimateRecord, cond: SimCondition) -> EstimateRecord:
    """Populate the per-estimate quantities whose replication means give bias,
    MSE, rejection rate (power if b1 > 0, false positives if b1 == 0),
    coverage and average estimated SE. Binary metrics stay 0/1."""
    err = rec.ate_hat - cond.b1
    return replace(rec, error=err, sq_error=err * err,
                   reject=1.0 if rec.p_value < ALPHA else 0.0,
                   covered=1.0 if rec.ci_lo <= cond.b1 <= rec.ci_hi else 0.0,
                   se_est=rec.se_hat)


def reject_event(rec: EstimateRecord, cond: SimCondition) -> str:
    if not rec.reject:
        return "none"
    return "power" if cond.b1 > 0 else "false_positive"


def failed_record(cond: SimCondition, dataset_id: int, kind: str, reason: str) -> EstimateRecord:
    nan = float("nan")
    return EstimateRecord(cond.condition_id, dataset_id, kind, nan, nan, nan, nan, nan, flag=reason)


def simulate_condition(cond: SimCondition, reps: int, seed: int,
                       estimators: Sequence[str] = ESTIMATORS,
                       alternative: str = "two-sided") -> list[EstimateRecord]:
    out = []
    for r in range(reps):
        dataset_id = cond.condition_id * reps + r
        try:
            d = generate_dataset(cond, rng_for(seed, cond.condition_id, r), r)
        except GenerationError as exc:
            out.extend(failed_record(cond, dataset_id, k, f"generation: {exc}") for k in estimators)
            continue
        for kind in estimators:
            try:
                rec = compute_metrics(fit_estimator(d, kind, dataset_id, alternative), cond)
            except EstimationError as exc:
                rec = failed_record(cond, dataset_id, kind, f"estimation: {exc}")
            out.append(rec)
    return out


def _simulate_chunk(args):
    conds, reps, seed, estimators, alternative = args
    return [r for c in conds for r in simulate_condition(c, reps, seed, estimators, alternative)]


def records_to_frame(records: Sequence[EstimateRecord],
                     conditions: Sequence[SimCondition]) -> pd.DataFrame:
    by_id = {c.condition_id: c for c in conditions}
    df = pd.DataFrame([asdict(r) for r in records])
    for f in FACTORS:
        df[f] = [getattr(by_id[k], f) for k in df["condition_id"]]
    order = {k: i for i, k in enumerate(ESTIMATORS)}
    df["_est"] = df["estimator"].map(order)
    df = df.sort_values(["condition_id", "dataset_id", "_est"], kind="mergesort")
    return df[ESTIMATE_COLUMNS].reset_index(drop=True)


def run_study(conditions: Sequence[SimCondition], reps: int, seed: int,
              estimators: Sequence[str] = ESTIMATORS, workers: int = 1,
              alternative: str = "two-sided") -> pd.DataFrame:
    """Simulate ``reps`` datasets per condition and fit every estimator.

    Output depends only on (conditions, reps, seed, estimators): each
    replication owns its RNG substream and rows are sorted by
    (condition_id, dataset_id, estimator) before returning.
    """
    if reps < 1:
        raise ConfigurationError("reps must be >= 1")
    for e in estimators:
        if e not in ESTIMATORS:
            raise ConfigurationError(f"unknown estimator {e!r}")
    if alternative not in ALTERNATIVES:
        raise ConfigurationError(f"unknown alternative {alternative!r}")
    conditions = list(conditions)
    if workers <= 1:
        records = _simulate_chunk((conditions, reps, seed, tuple(estimators), alternative))
    else:
        chunks = [conditions[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(_simulate_chunk,
                             [(c, reps, seed, tuple(estimators), alternative) for c in chunks if c])
            records = [r for part in parts for r in part]
    return records_to_frame(records, conditions)
