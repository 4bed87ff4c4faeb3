"""Dense least squares: dummy-coded designs, OLS/WLS via pivoted QR, and
cluster-robust sandwich covariance."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
import scipy.linalg as sla

RANK_TOL = 1e-10


class RankDeficiencyError(ValueError):
    """Raised when a design matrix is not of full column rank."""

    def __init__(self, message, dependent=()):
        super().__init__(message)
        self.dependent = list(dependent)


class LabelError(KeyError):
    """A factor level at predict time that the design was not built with."""


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class Term:
    factor: str | None  # None for the intercept
    level: object = None
    parents: tuple = ()  # (factor, level) pairs for interaction columns


@dataclass
class DesignMatrix:
    matrix: np.ndarray
    columns: list[str]
    terms: list[Term]
    levels: dict[str, list]
    focal: str | None = None
    interact: tuple[str, ...] = ()

    @property
    def shape(self):
        return self.matrix.shape

    def column_index(self, label: str) -> int:
        return self.columns.index(label)

    def transform(self, rows: pd.DataFrame) -> "DesignMatrix":
        """Encode new rows with this design's levels and column layout."""
        main = [f for f in self.levels]
        return build_design(rows, main, focal=self.focal, interact=self.interact,
                            levels=self.levels, strict=True)


def level_label(factor: str, level) -> str:
    if isinstance(level, (float, np.floating)) and float(level).is_integer():
        level = int(level)
    return f"{factor}[{level}]"


def build_design(rows: pd.DataFrame, factors: Sequence[str], focal: str | None = None,
                 interact: Sequence[str] | bool = (), levels: Mapping[str, Sequence] | None = None,
                 reference_levels: Mapping[str, object] | None = None,
                 strict: bool = False) -> DesignMatrix:
    """Intercept + treatment-coded dummies for each factor in ``factors``, plus
    ``focal`` x factor products for each factor in ``interact``.

    Levels default to the sorted unique values of each column and the reference
    is the first level. Interaction columns are ordered by factor, then factor
    level, then focal level.
    """
    factors = list(factors)
    if interact is True:
        interact = [f for f in factors if f != focal]
    interact = tuple(interact or ())
    if focal is not None and focal not in factors:
        raise ValueError(f"focal factor {focal!r} must be one of the main effects")
    for f in interact:
        if f not in factors or f == focal:
            raise ValueError(f"cannot interact {focal!r} with {f!r}")

    lv: dict[str, list] = {}
    for f in factors:
        if f not in rows:
            raise KeyError(f"rows lack factor column {f!r}")
        observed = pd.unique(rows[f])
        if levels is not None and f in levels:
            known = list(levels[f])
            unseen = [v for v in observed if v not in known]
            if unseen and strict:
                raise LabelError(f"factor {f!r} has unseen level(s) {unseen}")
            if unseen:
                known = known + sorted(unseen)
        else:
            known = sorted(observed.tolist())
        if reference_levels and f in reference_levels:
            ref = reference_levels[f]
            if ref not in known:
                raise LabelError(f"reference level {ref!r} not a level of {f!r}")
            known = [ref] + [v for v in known if v != ref]
        lv[f] = known

    n = len(rows)
    cols = [np.ones(n)]
    labels = ["(Intercept)"]
    terms = [Term(None)]
    dummies: dict[str, list[tuple[object, np.ndarray]]] = {}
    for f in factors:
        values = rows[f].to_numpy()
        if len(lv[f]) == 1:
            warnings.warn(f"factor {f!r} has a single level and contributes no columns",
                          stacklevel=2)
        dummies[f] = [(lvl, (values == lvl).astype(float)) for lvl in lv[f][1:]]
        for lvl, d in dummies[f]:
            cols.append(d)
            labels.append(level_label(f, lvl))
            terms.append(Term(f, lvl))
    for f in interact:
        for lvl, d in dummies[f]:
            for flvl, fd in dummies[focal]:
                cols.append(fd * d)
                labels.append(f"{level_label(focal, flvl)}:{level_label(f, lvl)}")
                terms.append(Term(f"{focal}:{f}", (flvl, lvl), ((focal, flvl), (f, lvl))))
    return DesignMatrix(np.column_stack(cols), labels, terms, lv, focal, interact)


@dataclass
class RegressionFit:
    coef: np.ndarray
    cov: np.ndarray
    resid: np.ndarray
    fitted: np.ndarray
    sigma2: float
    df: int
    X: np.ndarray
    y: np.ndarray
    weights: np.ndarray | None = None
    columns: list[str] = field(default_factory=list)
    robust_cov: np.ndarray | None = None
    robust_type: str | None = None
    n_clusters: int | None = None
    xtwx_inv: np.ndarray | None = None

    @property
    def se(self):
        return np.sqrt(np.diag(self.cov))

    @property
    def robust_se(self):
        return None if self.robust_cov is None else np.sqrt(np.diag(self.robust_cov))


def _as_matrix(X):
    if isinstance(X, DesignMatrix):
        return X.matrix, list(X.columns)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X, [f"x{i}" for i in range(X.shape[1])]


def ols_fit(X, y, weights=None) -> RegressionFit:
    """Weighted least squares by column-pivoted QR.

    Minimises sum(w * (y - X b)**2); classical covariance is
    sigma2 * inv(X' W X) with sigma2 = sum(w e^2) / (n - p).
    """
    Xm, labels = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    n, p = Xm.shape
    if y.shape != (n,):
        raise ValueError(f"y has shape {y.shape}, expected ({n},)")
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (n,) or np.any(~(weights > 0)):
            raise ValueError("weights must be strictly positive and aligned with rows")
        sw = np.sqrt(weights)
        Xw, yw = Xm * sw[:, None], y * sw
    else:
        Xw, yw = Xm, y

    Q, R, piv = sla.qr(Xw, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > RANK_TOL * d[0])) if p and d[0] > 0 else 0
    if rank < p:
        dep = [labels[j] for j in piv[rank:]]
        raise RankDeficiencyError(f"design is rank deficient (rank {rank} < {p}); "
                                  f"dependent columns: {dep}", dep)
    coef_p = sla.solve_triangular(R, Q.T @ yw)
    coef = np.empty(p)
    coef[piv] = coef_p
    Rinv = sla.solve_triangular(R, np.eye(p))
    inv_p = Rinv @ Rinv.T
    xtwx_inv = np.empty_like(inv_p)
    xtwx_inv[np.ix_(piv, piv)] = inv_p

    fitted = Xm @ coef
    resid = y - fitted
    df = n - p
    wr2 = resid ** 2 if weights is None else weights * resid ** 2
    sigma2 = float(wr2.sum() / df) if df > 0 else float("nan")
    return RegressionFit(coef, sigma2 * xtwx_inv, resid, fitted, sigma2, df, Xm, y,
                         weights, labels, xtwx_inv=xtwx_inv)


def cluster_robust_vcov(fit: RegressionFit, cluster_ids) -> np.ndarray:
    """CR1 sandwich covariance; also stored on ``fit``.

    bread = inv(X'WX); meat = sum_g s_g s_g' with s_g = X_g' W_g e_g; the
    result is scaled by G/(G-1) * (n-1)/(n-p).
    """
    cluster_ids = np.asarray(cluster_ids)
    n, p = fit.X.shape
    if cluster_ids.size == 0:
        raise ValueError("cluster ids are empty")
    if cluster_ids.shape != (n,):
        raise ValueError("cluster ids must align with the fitted rows")
    _, codes = np.unique(cluster_ids, return_inverse=True)
    G = int(codes.max()) + 1
    if G < 2:
        raise InferenceError("cluster-robust covariance needs at least 2 clusters")
    w = np.ones(n) if fit.weights is None else fit.weights
    scores = fit.X * (w * fit.resid)[:, None]
    S = np.zeros((G, p))
    np.add.at(S, codes, scores)
    meat = S.T @ S
    bread = fit.xtwx_inv
    V = bread @ meat @ bread
    V = 0.5 * (V + V.T) * (G / (G - 1)) * ((n - 1) / (n - p))
    fit.robust_cov = V
    fit.robust_type = "CR1"
    fit.n_clusters = G
    return V

