"""Nonparametric bootstrap of metamodel coefficients at the record, dataset
or condition level, compared against model-based standard errors."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import pandas as pd

from .metamodel import MetamodelSpec, SpecError, fit_spec, prepare, random_structure
from .mixed import NumericalError, RandomSpec, RandomTerm, fit_glmm_sqrt, fit_lmm
from .regression import RankDeficiencyError, ols_fit

LEVELS = ("record", "dataset", "condition")
FLAG_RANGE = (0.8, 1.25)

# model whose SEs each resampling level is expected to reproduce
MATCHED_RANDOM = {
    "individual": {"record": "none", "dataset": "ri_nested", "condition": "rs"},
    "aggregated": {"record": "none", "condition": "ri_condition"},
}
MODEL_LABEL = {"none": "OLS", "ri_nested": "RI-MLMM", "ri_condition": "RI-MLMM",
               "rs": "RS-MLMM"}


@dataclass
class BootstrapReport:
    level: str
    B: int
    n_dropped: int
    columns: list[str]
    estimate: np.ndarray
    boot_sd: np.ndarray
    model: str
    model_se: np.ndarray
    replicates: np.ndarray  # (B - n_dropped, p)

    @property
    def ratio(self) -> np.ndarray:
        return self.boot_sd / self.model_se

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({"level": self.level, "B": self.B, "n_dropped": self.n_dropped,
                             "coefficient": self.columns, "estimate": self.estimate,
                             "boot_sd": self.boot_sd, "model": self.model,
                             "model_se": self.model_se, "ratio": self.ratio})


def replicate_rng(seed: int, b: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(b,))))


def _blocks(keys: np.ndarray):
    """Row indices per block, blocks in order of first appearance."""
    _, first, inv = np.unique(keys, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    codes = rank[inv]
    sorter = np.argsort(codes, kind="stable")
    bounds = np.searchsorted(codes[sorter], np.arange(order.size + 1))
    return [sorter[bounds[i]:bounds[i + 1]] for i in range(order.size)]


def resample(data: pd.DataFrame, level: str, rng) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Row indices of one bootstrap sample plus fresh grouping ids.

    Blocks drawn more than once become distinct groups: every draw of a
    dataset (or condition) gets its own id, and datasets inside a redrawn
    condition are renumbered with it.
    """
    n = len(data)
    if level == "record":
        idx = np.asarray(rng.integers(0, n, size=n))
        return idx, {}
    key = "dataset_id" if level == "dataset" else "condition_id"
    if key not in data:
        raise SpecError(f"{level}-level resampling needs a {key!r} column")
    blocks = _blocks(data[key].to_numpy())
    pick = np.asarray(rng.integers(0, len(blocks), size=len(blocks)))
    parts = [blocks[k] for k in pick]
    idx = np.concatenate(parts)
    draw = np.repeat(np.arange(len(parts)), [p.size for p in parts])
    ids = {key: draw}
    if level == "condition" and "dataset_id" in data:
        ds = data["dataset_id"].to_numpy()[idx]
        _, ids["dataset_id"] = np.unique(np.column_stack([draw, ds]), axis=0,
                                         return_inverse=True)
        ids["dataset_id"] = ids["dataset_id"].ravel()
    elif level == "dataset" and "condition_id" in data:
        ids["condition_id"] = data["condition_id"].to_numpy()[idx]
    return idx, ids


def _refit(spec: MetamodelSpec, X, y, w, random: RandomSpec | None, start):
    if not spec.is_mixed:
        return ols_fit(X, y, w).coef
    if spec.link == "sqrt":
        return fit_glmm_sqrt(X, random, y, prior_weights=w, start=start).coef
    return fit_lmm(X, random, y, w, start=start).coef


def _replicate(args):
    spec, data, X, y, w, random, level, rng, start = args
    idx, ids = resample(data, level, rng)
    rs = None
    if random is not None:
        terms = []
        for t in random.terms:
            codes = ids.get(t.group, t.codes[idx])
            terms.append(RandomTerm(t.group, codes, t.Z[idx], list(t.names), t.structure))
        rs = RandomSpec(terms)
    try:
        return _refit(spec, X[idx], y[idx], None if w is None else w[idx], rs, start)
    except (RankDeficiencyError, NumericalError, np.linalg.LinAlgError, ValueError):
        return None


def bootstrap_metamodel(spec: MetamodelSpec, level: str, B: int = 200, *,
                        estimates: pd.DataFrame | None = None,
                        aggregates: pd.DataFrame | None = None, seed: int = 0, rng=None,
                        model_se: np.ndarray | None = None, model: str | None = None,
                        workers: int = 1) -> BootstrapReport:
    """Bootstrap SDs of ``spec``'s coefficients at ``level``.

    Each replicate has its own RNG substream keyed by (seed, replicate), so
    results do not depend on ``workers``; passing ``rng`` instead draws every
    replicate from that one generator in order. Refits that fail are dropped
    and counted. Mixed refits start from the full-data theta.

    Unless ``model_se`` is given, the comparison SEs come from the model
    matched to the level (OLS for records, nested random intercepts for
    datasets, random slopes for conditions), fitted once to the full data.
    """
    if level not in LEVELS:
        raise SpecError(f"unknown bootstrap level {level!r}")
    if B < 2:
        raise SpecError("B must be at least 2")
    if level == "record" and spec.is_mixed:
        raise SpecError("record-level resampling breaks the dependence a mixed "
                        "metamodel models; use dataset or condition level")
    if spec.level == "aggregated" and level == "dataset":
        raise SpecError("aggregated data have no dataset level")
    data, y, w, design = prepare(spec, estimates, aggregates)
    X = design.matrix
    full = fit_spec(spec, estimates, aggregates)
    start = full.fit.theta if full.is_mixed else None
    random = random_structure(spec, data, design) if spec.is_mixed else None

    if model_se is None:
        matched = MATCHED_RANDOM[spec.level][level]
        ref_spec = replace(spec, random=matched, cluster=None,
                           link=spec.link if matched != "none" else "identity")
        ref = full if ref_spec == spec else fit_spec(ref_spec, estimates, aggregates)
        model_se, model = ref.se, MODEL_LABEL[matched]
    model_se = np.asarray(model_se, float)

    if rng is not None:
        rngs = [rng] * B
    else:
        rngs = [replicate_rng(seed, b) for b in range(B)]
    jobs = [(spec, data, X, y, w, random, level, r, start) for r in rngs]
    if workers > 1 and rng is None:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate, jobs, chunksize=max(1, B // (4 * workers))))
    else:
        results = [_replicate(j) for j in jobs]
    kept = [r for r in results if r is not None]
    reps = np.array(kept) if kept else np.empty((0, X.shape[1]))
    sd = reps.std(axis=0, ddof=1) if len(kept) >= 2 else np.full(X.shape[1], np.nan)
    return BootstrapReport(level, B, B - len(kept), list(design.columns), full.coef.copy(),
                           sd, model or "given", model_se, reps)


def calibration_summary(reports: Sequence[BootstrapReport]) -> pd.DataFrame:
    """Bootstrap SD against model SE per level and coefficient; ``flag`` marks
    ratios outside [0.8, 1.25]."""
    rows = []
    for rep in reports:
        for j, c in enumerate(rep.columns):
            ratio = float(rep.ratio[j])
            rows.append(dict(level=rep.level, coefficient=c, boot_sd=float(rep.boot_sd[j]),
                             model=rep.model, model_se=float(rep.model_se[j]), ratio=ratio,
                             flag=not (FLAG_RANGE[0] <= ratio <= FLAG_RANGE[1])))
    return pd.DataFrame(rows, columns=["level", "coefficient", "boot_sd", "model", "model_se",
                                       "ratio", "flag"])
