"""Linear mixed models by REML on the profiled deviance.

The random-effects covariance of each term is sigma^2 * L L' with L lower
triangular; the optimiser works on a log-Cholesky vector (log diagonals,
free off-diagonals). For a given theta the penalised least squares system

    A = Lambda' Z' W Z Lambda + I

is factorised sparsely. Random-effect columns are ordered once per problem
so that, for nested grouping factors, every inner-group effect precedes the
effects of the outer group it belongs to. With that ordering the Cholesky
factor has no fill outside the outer-group blocks, and for one or two nested
factors the factorisation reduces to batched dense blocks plus one Schur
complement per outer group ("block" method). Deeper nestings go through a
general sparse LU with the same ordering and no pivoting ("sparse" method).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import pandas as pd
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import optimize, stats

from .regression import DesignMatrix, ols_fit

LOG_FLOOR = -40.0
LOG_CEIL = 40.0
BOUNDARY_REL = 1e-8


class DomainError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


class NestingError(ValueError):
    pass


@dataclass
class RandomTerm:
    """Random effects ``names`` varying over the levels of ``group``.

    ``Z`` holds the per-row model columns of the term (a column of ones for a
    random intercept, estimator dummies for random slopes).
    """

    group: str
    codes: np.ndarray
    Z: np.ndarray
    names: list[str]
    structure: str = "full"

    def __post_init__(self):
        self.codes = np.asarray(self.codes)
        self.Z = np.asarray(self.Z, dtype=float)
        if self.Z.ndim == 1:
            self.Z = self.Z[:, None]
        if self.Z.shape[1] != len(self.names):
            raise ValueError("one name per random-effect column is required")
        if self.structure not in ("full", "diag"):
            raise ValueError(f"unknown covariance structure {self.structure!r}")

    @property
    def n_effects(self):
        return self.Z.shape[1]

    @property
    def n_theta(self):
        r = self.n_effects
        return r * (r + 1) // 2 if self.structure == "full" else r


@dataclass
class RandomSpec:
    terms: list[RandomTerm]

    def subset(self, rows) -> "RandomSpec":
        return RandomSpec([RandomTerm(t.group, t.codes[rows], t.Z[rows], list(t.names),
                                      t.structure) for t in self.terms])


def random_term(data: pd.DataFrame, group: str, columns: Sequence[str] = (),
                design: DesignMatrix | None = None, structure: str = "full") -> RandomTerm:
    """Random intercept for ``group`` plus random slopes on ``columns`` of
    ``design`` (labels such as ``estimator[adjusted]``)."""
    cols = [np.ones(len(data))]
    for c in columns:
        if design is None:
            raise ValueError("random slopes need the fixed-effects design")
        cols.append(design.matrix[:, design.column_index(c)])
    return RandomTerm(group, data[group].to_numpy(), np.column_stack(cols),
                      ["(Intercept)", *columns], structure)


def theta_to_factors(theta, terms: Sequence[RandomTerm]) -> list[np.ndarray]:
    """Relative covariance factors L_t from the log-Cholesky vector."""
    out, pos = [], 0
    for t in terms:
        r = t.n_effects
        L = np.zeros((r, r))
        if t.structure == "full":
            k = r * (r + 1) // 2
            L[np.tril_indices(r)] = theta[pos:pos + k]
            pos += k
        else:
            L[np.diag_indices(r)] = theta[pos:pos + r]
            pos += r
        d = np.diag_indices(r)
        L[d] = np.exp(np.clip(L[d], LOG_FLOOR, LOG_CEIL))
        out.append(L)
    return out


def factors_to_theta(factors: Sequence[np.ndarray], terms: Sequence[RandomTerm]) -> np.ndarray:
    parts = []
    for L, t in zip(factors, terms):
        L = np.array(L, dtype=float)
        d = np.diag_indices(t.n_effects)
        L[d] = np.log(np.maximum(np.abs(L[d]), math.exp(LOG_FLOOR)))
        parts.append(L[np.tril_indices(t.n_effects)] if t.structure == "full" else L[d])
    return np.concatenate(parts) if parts else np.zeros(0)


def identity_theta(terms: Sequence[RandomTerm]) -> np.ndarray:
    return factors_to_theta([np.eye(t.n_effects) for t in terms], terms)


def _segment_sum(E: sp.csr_matrix, arr: np.ndarray) -> np.ndarray:
    """Sum rows of ``arr`` (n, ...) into groups given an indicator (G, n)."""
    flat = arr.reshape(arr.shape[0], -1)
    return np.asarray(E @ flat).reshape((E.shape[0],) + arr.shape[1:])


def _indicator(codes: np.ndarray, G: int) -> sp.csr_matrix:
    n = codes.size
    return sp.csr_matrix((np.ones(n), (codes, np.arange(n))), shape=(G, n))


@dataclass
class PlsSolution:
    """Penalised least squares solution at one theta.

    ``u`` holds the spherical random effects per term, shape (G_t, r_t);
    the conditional modes are b_g = L_t u_g. ``inverse_blocks(t)`` returns the
    diagonal blocks of A^-1 belonging to term t, shape (G_t, r_t, r_t).
    """

    factors: list[np.ndarray]
    logdet_A: float
    logdet_S: float
    beta: np.ndarray
    pwrss: float
    u: list[np.ndarray]
    cS: tuple
    inverse_blocks: Callable[[int], np.ndarray]

    def fixed_cov_unscaled(self):
        return sla.cho_solve(self.cS, np.eye(self.beta.size))

    def modes(self) -> list[np.ndarray]:
        return [u @ L.T for u, L in zip(self.u, self.factors)]


class LmmProblem:
    """Cross-products and sparsity structure for one mixed model."""

    def __init__(self, X, y, random: RandomSpec, weights=None, columns=None,
                 method: str = "auto"):
        if isinstance(X, DesignMatrix):
            columns = list(X.columns)
            X = X.matrix
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        n, p = self.X.shape
        self.n, self.p = n, p
        self.columns = list(columns) if columns is not None else [f"x{i}" for i in range(p)]
        if self.y.shape != (n,):
            raise ValueError("y must align with the design rows")
        self.terms = list(random.terms)
        self.random = random
        if not self.terms:
            raise ValueError("at least one random term is required")
        for t in self.terms:
            if t.Z.shape[0] != n or t.codes.shape[0] != n:
                raise ValueError(f"random term {t.group!r} does not align with the data")
        ols_fit(self.X, self.y)  # raises on a rank-deficient fixed design
        self._build_structure()
        if method == "auto":
            method = "block" if len(self.terms) <= 2 else "sparse"
        if method == "block" and len(self.terms) > 2:
            raise ValueError("the block method handles at most two nested factors")
        if method not in ("block", "sparse"):
            raise ValueError(f"unknown method {method!r}")
        self.method = method
        if method == "sparse":
            self._build_sparse()
        self.set_weights(weights)

    # structure -----------------------------------------------------------
    def _build_structure(self):
        self.levels, self.group_codes = [], []
        for t in self.terms:
            lv, codes = np.unique(t.codes, return_inverse=True)
            if lv.size < 2:
                raise ValueError(f"grouping factor {t.group!r} needs at least 2 groups")
            self.levels.append(lv)
            self.group_codes.append(codes.astype(np.int64))
        groups = [t.group for t in self.terms]
        if len(set(groups)) != len(groups):
            raise ValueError("each grouping factor may appear in one random term only")
        # finest first; each factor must nest in every coarser one
        order = sorted(range(len(self.terms)), key=lambda i: -self.levels[i].size)
        for a_pos, a in enumerate(order):
            for b in order[a_pos + 1:]:
                ca, cb = self.group_codes[a], self.group_codes[b]
                outer = np.empty(self.levels[a].size, dtype=np.int64)
                outer[ca] = cb
                if np.any(outer[ca] != cb):
                    raise NestingError(f"{self.terms[a].group!r} is not nested in "
                                       f"{self.terms[b].group!r}")
        self.order = order
        self.n_theta = sum(t.n_theta for t in self.terms)
        self.n_groups = [lv.size for lv in self.levels]

    def _build_sparse(self):
        n = self.n
        order = self.order
        depth = {i: k for k, i in enumerate(order)}
        coarsest = order[-1]
        rows, cols, vals, offs = [], [], [], []
        col_outer, col_depth = [], []
        off = 0
        for i, t in enumerate(self.terms):
            r, G = t.n_effects, self.n_groups[i]
            codes = self.group_codes[i]
            for e in range(r):
                rows.append(np.arange(n))
                cols.append(off + codes * r + e)
                vals.append(t.Z[:, e])
            outer_of_group = np.empty(G, dtype=np.int64)
            outer_of_group[codes] = self.group_codes[coarsest]
            col_outer.append(np.repeat(outer_of_group, r))
            col_depth.append(np.full(G * r, depth[i]))
            offs.append(off)
            off += G * r
        q = off
        self.q, self.offsets = q, offs
        perm = np.lexsort((np.arange(q), np.concatenate(col_depth), np.concatenate(col_outer)))
        pos = np.empty(q, dtype=np.int64)
        pos[perm] = np.arange(q)
        self.pos = pos
        Z = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), pos[np.concatenate(cols)])),
                          shape=(n, q)).tocsc()
        Z.eliminate_zeros()
        self.Z = Z
        lr, lc, lidx = [], [], []
        base = 0
        for i, t in enumerate(self.terms):
            r, G = t.n_effects, self.n_groups[i]
            ti, tj = np.tril_indices(r) if t.structure == "full" else (np.arange(r),) * 2
            g = np.arange(G)
            for a, b in zip(ti, tj):
                lr.append(pos[offs[i] + g * r + a])
                lc.append(pos[offs[i] + g * r + b])
                lidx.append(np.full(G, base + a * r + b))
            base += r * r
        lr, lc, lidx = map(np.concatenate, (lr, lc, lidx))
        tag = sp.coo_matrix((np.arange(1, lr.size + 1, dtype=float), (lr, lc)), shape=(q, q)).tocsc()
        self._lambda_map = lidx[tag.data.astype(np.int64) - 1]
        tag.data = np.ones_like(tag.data)
        self._lambda_pattern = tag

    def set_weights(self, weights):
        """(Re)compute weighted cross-products; the PIRLS loop calls this."""
        if weights is not None:
            weights = np.asarray(weights, dtype=float)
            if weights.shape != (self.n,) or np.any(~(weights > 0)):
                raise ValueError("weights must be strictly positive and aligned with rows")
        self.weights = weights
        w = np.ones(self.n) if weights is None else weights
        self.sum_log_w = float(np.sum(np.log(w))) if weights is not None else 0.0
        Xw = self.X * w[:, None]
        self.XtWX = self.X.T @ Xw
        self.XtWy = Xw.T @ self.y
        self.yWy = float(self.y @ (w * self.y))
        if self.method == "sparse":
            WZ = sp.diags(w) @ self.Z
            self.ZtWZ = (self.Z.T @ WZ).tocsc()
            self.ZtWX = np.asarray(WZ.T @ self.X)
            self.ZtWy = np.asarray(WZ.T @ self.y).ravel()
        else:
            self._block_crossprods(w)

    def set_response(self, y):
        self.y = np.asarray(y, dtype=float)
        self.set_weights(self.weights)

    def _block_crossprods(self, w):
        outer = self.order[-1]
        inner = self.order[0] if len(self.order) == 2 else None
        self._outer, self._inner = outer, inner
        Xy = np.column_stack([self.X, self.y])
        Zo = self.terms[outer].Z
        Eo = _indicator(self.group_codes[outer], self.n_groups[outer])
        wZo = Zo * w[:, None]
        self._ZoZo = _segment_sum(Eo, wZo[:, :, None] * Zo[:, None, :])
        self._ZoXy = _segment_sum(Eo, wZo[:, :, None] * Xy[:, None, :])
        if inner is not None:
            Zi = self.terms[inner].Z
            Ei = _indicator(self.group_codes[inner], self.n_groups[inner])
            wZi = Zi * w[:, None]
            self._ZiZi = _segment_sum(Ei, wZi[:, :, None] * Zi[:, None, :])
            self._ZiZo = _segment_sum(Ei, wZi[:, :, None] * Zo[:, None, :])
            self._ZiXy = _segment_sum(Ei, wZi[:, :, None] * Xy[:, None, :])
            io = np.empty(self.n_groups[inner], dtype=np.int64)
            io[self.group_codes[inner]] = self.group_codes[outer]
            self._inner_to_outer = io
            self._Mio = _indicator(io, self.n_groups[outer])
            self._grouped = None

    # evaluation ----------------------------------------------------------
    def factors(self, theta) -> list[np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_theta,):
            raise DomainError(f"theta must have length {self.n_theta}")
        if not np.all(np.isfinite(theta)):
            raise DomainError("theta must be finite")
        return theta_to_factors(theta, self.terms)

    def solve(self, theta) -> PlsSolution:
        Ls = self.factors(theta)
        if self.method == "block":
            return self._solve_block(Ls)
        return self._solve_sparse(Ls)

    def _finish(self, Ls, logdet_A, RtS, RtSy, ysol, u_of: Callable, inverse_blocks):
        """Shared tail: fixed-effects Schur complement, beta, pwrss."""
        p = self.p
        S = self.XtWX - RtS
        S = 0.5 * (S + S.T)
        try:
            cS = sla.cho_factor(S, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("fixed-effects Schur complement is not positive definite") from exc
        rhs = self.XtWy - RtSy
        beta = sla.cho_solve(cS, rhs)
        logdet_S = 2.0 * float(np.sum(np.log(np.diag(cS[0]))))
        pwrss = self.yWy - ysol - beta @ rhs
        return PlsSolution(Ls, logdet_A, logdet_S, beta, max(float(pwrss), 0.0), u_of(beta),
                           cS, inverse_blocks)

    def _solve_block(self, Ls) -> PlsSolution:
        p = self.p
        Lo = Ls[self._outer]
        C = np.einsum("ba,kbc,cd->kad", Lo, self._ZoZo, Lo)
        C += np.eye(Lo.shape[0])
        Ro = np.einsum("ba,kbm->kam", Lo, self._ZoXy)
        inner = self._inner
        if inner is not None and Ls[inner].shape == (1, 1):
            return self._solve_block_scalar_inner(Ls, C, Ro)
        if inner is not None:
            Li = Ls[inner]
            D = np.einsum("ba,kbc,cd->kad", Li, self._ZiZi, Li)
            D += np.eye(Li.shape[0])
            B = np.einsum("ba,kbc,cd->kad", Li, self._ZiZo, Lo)
            Ri = np.einsum("ba,kbm->kam", Li, self._ZiXy)
            cD = np.linalg.cholesky(D)
            Dinv = np.linalg.inv(D)
            DiB = Dinv @ B
            DiR = Dinv @ Ri
            C -= _segment_sum(self._Mio, np.swapaxes(B, 1, 2) @ DiB)
            Ro_t = Ro - _segment_sum(self._Mio, np.swapaxes(B, 1, 2) @ DiR)
            logdet_D = 2.0 * float(np.sum(np.log(np.diagonal(cD, axis1=1, axis2=2))))
        else:
            Ro_t, logdet_D = Ro, 0.0
        try:
            cC = np.linalg.cholesky(C)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("outer-group Schur complement is not positive definite") from exc
        Cinv = np.linalg.inv(C)
        logdet_A = logdet_D + 2.0 * float(np.sum(np.log(np.diagonal(cC, axis1=1, axis2=2))))
        so = Cinv @ Ro_t  # (Go, ro, p+1)
        RtS = np.einsum("kam,kan->mn", Ro, so)
        if inner is not None:
            si = DiR - DiB @ so[self._inner_to_outer]
            RtS += np.einsum("kam,kan->mn", Ri, si)
        RtSX, RtSy, ysol = RtS[:p, :p], RtS[:p, p], RtS[p, p]

        def u_of(beta):
            coef = np.append(-beta, 1.0)
            us = [None] * len(self.terms)
            us[self._outer] = so @ coef
            if inner is not None:
                us[inner] = si @ coef
            return us

        def inverse_blocks(t):
            if t == self._outer:
                return Cinv
            Ck = Cinv[self._inner_to_outer]
            return Dinv + DiB @ Ck @ np.swapaxes(DiB, 1, 2)

        return self._finish(Ls, logdet_A, RtSX, RtSy, ysol, u_of, inverse_blocks)

    def _scalar_inner_sums(self):
        """Inner-group sums grouped by the distinct values of z_j' W z_j.

        The scalar inner block is d_j = l^2 v_j + 1, so sums weighted by 1/d_j
        only need per-value partial sums; unweighted balanced data has one
        distinct value and each evaluation then costs O(outer groups).
        """
        if getattr(self, "_grouped", None) is not None:
            return self._grouped
        v = self._ZiZi[:, 0, 0]
        vals, inv = np.unique(v, return_inverse=True)
        if vals.size > 16:
            self._grouped = False
            return False
        zo, zx = self._ZiZo[:, 0, :], self._ZiXy[:, 0, :]
        Go = self.n_groups[self._outer]
        P1, P2, P3 = [], [], []
        for i in range(vals.size):
            sel = inv == i
            M = _indicator(self._inner_to_outer[sel], Go)
            P1.append(_segment_sum(M, zo[sel][:, :, None] * zo[sel][:, None, :]))
            P2.append(_segment_sum(M, zo[sel][:, :, None] * zx[sel][:, None, :]))
            P3.append(zx[sel].T @ zx[sel])
        self._grouped = (vals, np.array(P1), np.array(P2), np.array(P3))
        return self._grouped

    def _solve_block_scalar_inner(self, Ls, C, Ro) -> PlsSolution:
        # same elimination as _solve_block with 1x1 inner blocks
        p, inner, io = self.p, self._inner, self._inner_to_outer
        li = float(Ls[inner][0, 0])
        l2 = li * li
        Lo = Ls[self._outer]
        v = self._ZiZi[:, 0, 0]
        d = l2 * v + 1.0
        grouped = self._scalar_inner_sums()
        if grouped:
            vals, P1, P2, P3 = grouped
            c = 1.0 / (l2 * vals + 1.0)
            S1 = np.tensordot(c, P1, axes=1)
            S2 = np.tensordot(c, P2, axes=1)
            S3 = np.tensordot(c, P3, axes=1)
            logdet_D = float(np.sum(np.log(d)))
        else:
            zo, zx = self._ZiZo[:, 0, :], self._ZiXy[:, 0, :]
            zod = zo / d[:, None]
            S1 = _segment_sum(self._Mio, zod[:, :, None] * zo[:, None, :])
            S2 = _segment_sum(self._Mio, zod[:, :, None] * zx[:, None, :])
            S3 = (zx / d[:, None]).T @ zx
            logdet_D = float(np.sum(np.log(d)))
        LoT = Lo.T
        C = C - l2 * (LoT @ S1 @ Lo)
        Ro_t = Ro - l2 * (LoT @ S2)
        try:
            cC = np.linalg.cholesky(C)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("outer-group Schur complement is not positive definite") from exc
        Cinv = np.linalg.inv(C)
        logdet_A = logdet_D + 2.0 * float(np.sum(np.log(np.diagonal(cC, axis1=1, axis2=2))))
        so = Cinv @ Ro_t
        RtS = (np.einsum("kam,kan->mn", Ro, so) + l2 * S3
               - l2 * np.einsum("kam,kan->mn", S2, Lo @ so))
        RtSX, RtSy, ysol = RtS[:p, :p], RtS[:p, p], RtS[p, p]

        def inner_parts():
            B = li * (self._ZiZo[:, 0, :] @ Lo)
            Ri = li * self._ZiXy[:, 0, :]
            return B / d[:, None], Ri / d[:, None]

        def u_of(beta):
            coef = np.append(-beta, 1.0)
            DiB, DiR = inner_parts()
            so_c = so @ coef
            us = [None] * len(self.terms)
            us[self._outer] = so_c
            us[inner] = (DiR @ coef - np.einsum("ka,ka->k", DiB, so_c[io]))[:, None]
            return us

        def inverse_blocks(t):
            if t == self._outer:
                return Cinv
            DiB, _ = inner_parts()
            extra = np.einsum("ka,kab,kb->k", DiB, Cinv[io], DiB)
            return (1.0 / d + extra)[:, None, None]

        return self._finish(Ls, logdet_A, RtSX, RtSy, ysol, u_of, inverse_blocks)

    def _solve_sparse(self, Ls) -> PlsSolution:
        p = self.p
        flat = np.concatenate([L.ravel() for L in Ls])
        Lam = self._lambda_pattern.copy()
        Lam.data = flat[self._lambda_map]
        A = (Lam.T @ self.ZtWZ @ Lam + sp.identity(self.q, format="csc")).tocsc()
        try:
            lu = spla.splu(A, permc_spec="NATURAL", diag_pivot_thresh=0.0,
                           options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise NumericalError(f"sparse factorisation failed: {exc}") from exc
        udiag = lu.U.diagonal()
        if np.any(udiag <= 0) or np.any(lu.perm_r != np.arange(self.q)):
            raise NumericalError("penalised system is not numerically positive definite")
        logdet_A = float(np.sum(np.log(udiag)))
        R = np.asarray(Lam.T @ np.column_stack([self.ZtWX, self.ZtWy]))
        sol = lu.solve(R)
        RtS = R.T @ sol

        def unpack(vec):
            out = []
            for i, t in enumerate(self.terms):
                r, G = t.n_effects, self.n_groups[i]
                out.append(vec[self.pos[self.offsets[i]:self.offsets[i] + G * r]].reshape(G, r))
            return out

        def u_of(beta):
            return unpack(sol @ np.append(-beta, 1.0))

        def inverse_blocks(t):
            r, G = self.terms[t].n_effects, self.n_groups[t]
            idx = self.pos[self.offsets[t]:self.offsets[t] + G * r]
            out = np.empty((G, r, r))
            per = max(1, 512 // r)
            for g0 in range(0, G, per):
                g1 = min(G, g0 + per)
                sel = idx[g0 * r:g1 * r]
                E = np.zeros((self.q, sel.size))
                E[sel, np.arange(sel.size)] = 1.0
                blk = lu.solve(E)[sel]
                for k in range(g1 - g0):
                    out[g0 + k] = blk[k * r:(k + 1) * r, k * r:(k + 1) * r]
            return out

        return self._finish(Ls, logdet_A, RtS[:p, :p], RtS[:p, p], RtS[p, p], u_of,
                            inverse_blocks)

    def deviance(self, theta) -> float:
        """REML criterion with beta and sigma^2 profiled out."""
        return self.reml(self.solve(theta))

    def reml(self, s: PlsSolution) -> float:
        df = self.n - self.p
        if s.pwrss <= 0:
            return -np.inf
        return (s.logdet_A + s.logdet_S + df * (1.0 + math.log(2.0 * math.pi * s.pwrss / df))
                - self.sum_log_w)

    def ols_reml(self) -> float:
        """REML criterion of the model with every random effect removed."""
        fit = ols_fit(self.X, self.y, self.weights)
        df = self.n - self.p
        _, logdet = np.linalg.slogdet(self.XtWX)
        return logdet + df * (1.0 + math.log(2.0 * math.pi * fit.sigma2)) - self.sum_log_w

    def linear_predictor(self, sol: PlsSolution) -> np.ndarray:
        eta = self.X @ sol.beta
        for t, codes, b in zip(self.terms, self.group_codes, sol.modes()):
            eta = eta + np.einsum("ij,ij->i", t.Z, b[codes])
        return eta


@dataclass
class VarComp:
    group: str
    name: str
    name2: str | None
    value: float  # variance if name2 is None, else covariance
    corr: float | None = None
    boundary: bool = False


@dataclass
class MixedFit:
    columns: list[str]
    coef: np.ndarray
    cov: np.ndarray
    sigma2: float
    theta: np.ndarray
    deviance: float
    varcomps: list[VarComp]
    group_covs: dict[str, np.ndarray]
    group_names: dict[str, list[str]]
    n_obs: int
    n_groups: dict[str, int]
    converged: bool
    n_evals: int
    boundary: bool
    family: str = "gaussian"
    link: str = "identity"
    problem: LmmProblem | None = field(default=None, repr=False)
    message: str = ""

    @property
    def se(self):
        return np.sqrt(np.diag(self.cov))

    @property
    def z(self):
        return self.coef / self.se

    @property
    def p_values(self):
        return 2.0 * stats.norm.sf(np.abs(self.z))

    def coef_of(self, label):
        return float(self.coef[self.columns.index(label)])

    def se_of(self, label):
        return float(self.se[self.columns.index(label)])

    def variance(self, group, name="(Intercept)"):
        i = self.group_names[group].index(name)
        return float(self.group_covs[group][i, i])

    def coef_table(self) -> pd.DataFrame:
        return pd.DataFrame({"term": self.columns, "estimate": self.coef, "se": self.se,
                             "z": self.z, "p": self.p_values})

    def varcomp_table(self) -> pd.DataFrame:
        rows = [dict(group=v.group, name=v.name, name2=v.name2 or "", value=v.value,
                     corr=np.nan if v.corr is None else v.corr, boundary=v.boundary)
                for v in self.varcomps]
        rows.append(dict(group="Residual", name="", name2="", value=self.sigma2,
                         corr=np.nan, boundary=False))
        return pd.DataFrame(rows)


def nelder_mead(fun, x0, max_evals=5000, rel_tol=1e-8, step=1.0):
    """Nelder-Mead on ``fun`` with one restart from the incumbent.

    Returns (x, f, n_evals, converged); converged means the run stopped on
    the tolerance (not the evaluation budget) and the restart improved the
    objective by less than rel_tol * |f|.
    """
    x = np.asarray(x0, dtype=float)
    n = x.size
    fx = fun(x)
    total = 1
    if n == 0:
        return x, fx, total, True
    converged = False
    for attempt in range(2):
        remaining = max_evals - total
        if remaining <= n + 1:
            break
        simplex = np.vstack([x] + [x + step * e for e in np.eye(n)])
        tol = rel_tol * max(abs(fx), 1.0) if np.isfinite(fx) else rel_tol
        res = optimize.minimize(fun, x, method="Nelder-Mead",
                                options=dict(maxfev=remaining, initial_simplex=simplex,
                                             xatol=1e-6, fatol=tol, adaptive=n > 4))
        total += res.nfev
        improvement = fx - res.fun
        if res.fun <= fx:
            x, fx = np.asarray(res.x), float(res.fun)
        if res.status != 0:
            break
        if attempt == 1:
            converged = improvement <= rel_tol * max(abs(fx), 1.0)
        step = min(step, 0.1)
    return x, fx, total, converged


def fit_lmm(design, random: RandomSpec, y, weights=None, *, start=None,
            max_evals: int = 5000, rel_tol: float = 1e-8,
            problem: LmmProblem | None = None, refine: bool = True) -> MixedFit:
    """REML fit of y = X beta + Z b + e.

    Nelder-Mead (with one restart) on the profiled deviance, optionally
    followed by a quasi-Newton polish that is kept only if it lowers the
    deviance. Variances below 1e-8 * sigma^2 are reported as 0 and flagged.
    """
    if problem is None:
        problem = LmmProblem(design, y, random, weights)
    theta0 = identity_theta(problem.terms) if start is None else np.asarray(start, float)

    def objective(th):
        try:
            d = problem.deviance(th)
        except NumericalError:
            return np.inf
        return d if np.isfinite(d) else np.inf

    theta, dev, nfev, converged = nelder_mead(objective, theta0, max_evals, rel_tol,
                                              step=1.0 if start is None else 0.2)
    if refine and theta.size and np.isfinite(dev):
        res = optimize.minimize(objective, theta, method="L-BFGS-B",
                                options=dict(maxfun=max(200, 40 * theta.size), ftol=1e-15,
                                             gtol=1e-8, eps=1e-7))
        nfev += res.nfev
        if res.fun < dev:
            theta, dev = np.asarray(res.x), float(res.fun)
    return finish_fit(problem, theta, dev, nfev, converged)


def finish_fit(problem: LmmProblem, theta, dev, nfev, converged, *, family="gaussian",
               link="identity") -> MixedFit:
    sol = problem.solve(theta)
    df = problem.n - problem.p
    sigma2 = sol.pwrss / df
    cov = sigma2 * sol.fixed_cov_unscaled()
    varcomps, covs, names = [], {}, {}
    boundary_any = False
    for t, L in zip(problem.terms, sol.factors):
        G = sigma2 * (L @ L.T)
        r = t.n_effects
        flags = np.diag(G) < BOUNDARY_REL * sigma2
        if np.any(flags):
            boundary_any = True
            G[flags, :] = 0.0
            G[:, flags] = 0.0
        covs[t.group] = G
        names[t.group] = list(t.names)
        sd = np.sqrt(np.diag(G))
        for a in range(r):
            varcomps.append(VarComp(t.group, t.names[a], None, float(G[a, a]), None,
                                    bool(flags[a])))
        if t.structure == "full":
            for a in range(r):
                for b in range(a + 1, r):
                    corr = float(G[a, b] / (sd[a] * sd[b])) if sd[a] > 0 and sd[b] > 0 else 0.0
                    varcomps.append(VarComp(t.group, t.names[a], t.names[b], float(G[a, b]),
                                            corr, bool(flags[a] or flags[b])))
    n_groups = {t.group: int(G) for t, G in zip(problem.terms, problem.n_groups)}
    return MixedFit(list(problem.columns), sol.beta.copy(), cov, float(sigma2),
                    np.asarray(theta, float).copy(), float(dev), varcomps, covs, names,
                    problem.n, n_groups, bool(converged), int(nfev), boundary_any,
                    family, link, problem)


def refit_at_theta(design, random: RandomSpec, y, theta, weights=None) -> MixedFit:
    """Rebuild a fit (with its problem) at a stored theta, without optimising."""
    problem = LmmProblem(design, y, random, weights)
    theta = np.asarray(theta, float)
    return finish_fit(problem, theta, problem.deviance(theta), 0, True)


# ---------------------------------------------------------------------------
# empirical Bayes


@dataclass
class EbRecord:
    group: str
    level: object
    effect: str
    deviation: float
    composed: float
    cond_sd: float
    reliability: float


def _term_index(problem: LmmProblem, group: str | None) -> int:
    if group is None:
        return problem.order[-1]
    return [t.group for t in problem.terms].index(group)


def blup_estimates(fit: MixedFit, group: str | None = None) -> list[EbRecord]:
    """Conditional modes of one grouping factor's effects (default: the
    coarsest factor), their conditional SDs, and reliabilities
    psi^2 / (condvar + psi^2).

    ``composed`` adds the matching fixed coefficient (intercept or slope) to
    each deviation.
    """
    problem = fit.problem
    if problem is None:
        raise ValueError("fit does not carry its problem; use refit_at_theta")
    ti = _term_index(problem, group)
    t = problem.terms[ti]
    sol = problem.solve(fit.theta)
    L = sol.factors[ti]
    dev = sol.modes()[ti]
    Ainv = sol.inverse_blocks(ti)
    ccov = fit.sigma2 * (L[None] @ Ainv @ L.T[None])
    psi2 = np.diag(fit.group_covs[t.group])
    zero = psi2 <= 0
    dev = np.where(zero[None, :], 0.0, dev)
    cvar = np.clip(np.diagonal(ccov, axis1=1, axis2=2), 0.0, None)
    fixed = np.array([fit.coef_of(nm) if nm in fit.columns else 0.0 for nm in t.names])
    recs = []
    for g, lvl in enumerate(problem.levels[ti]):
        lvl_out = lvl.item() if hasattr(lvl, "item") else lvl
        for e, nm in enumerate(t.names):
            if zero[e]:
                rel, csd = 0.0, 0.0
            else:
                rel = float(psi2[e] / (cvar[g, e] + psi2[e]))
                csd = float(math.sqrt(cvar[g, e]))
            recs.append(EbRecord(t.group, lvl_out, nm, float(dev[g, e]),
                                 float(fixed[e] + dev[g, e]), csd, rel))
    return recs


def average_reliability(records: Sequence[EbRecord], effect: str) -> float:
    vals = [r.reliability for r in records if r.effect == effect]
    if not vals:
        raise ValueError(f"no empirical Bayes records for effect {effect!r}")
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# square-root link GLMM (Gaussian family)

ETA_FLOOR = 1e-6


def _pirls(problem: LmmProblem, theta, eta, y, pw, tol, max_iter):
    """PIRLS sweeps at fixed theta; returns (eta, sweeps, converged)."""
    for sweep in range(1, max_iter + 1):
        sol = problem.solve(theta)
        target = problem.linear_predictor(sol)
        new, step = target, 1.0
        while np.any(new < ETA_FLOOR) and step > 1e-4:
            step *= 0.5
            new = eta + step * (target - eta)
        new = np.maximum(new, ETA_FLOOR)
        change = np.linalg.norm(new - eta) / max(np.linalg.norm(eta), 1e-300)
        eta = new
        problem.y = eta + (y - eta ** 2) / (2.0 * eta)
        problem.set_weights(pw * 4.0 * eta ** 2)
        if change < tol:
            return eta, sweep, True
    return eta, max_iter, False


def fit_glmm_sqrt(design, random: RandomSpec, y, *, prior_weights=None,
                  max_outer: int = 200, eta_tol: float = 1e-6, theta_tol: float = 1e-4,
                  max_evals: int = 5000, start=None) -> MixedFit:
    """Gaussian GLMM with sqrt(E y) = X beta + Z b, fitted by PQL-style PIRLS.

    Alternates PIRLS sweeps at fixed theta (working response
    z = eta + (y - eta^2) / (2 eta), working weights 4 eta^2) until the
    relative change in eta is below ``eta_tol``, and REML re-estimation of
    theta on the converged working model, until theta moves by less than
    ``theta_tol``. At most ``max_outer`` sweeps/updates each.
    """
    y = np.asarray(y, dtype=float)
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise ValueError("sqrt-link responses must be finite and non-negative")
    X = design.matrix if isinstance(design, DesignMatrix) else np.asarray(design, float)
    pw = np.ones(y.size) if prior_weights is None else np.asarray(prior_weights, float)
    init = ols_fit(X, np.sqrt(y))
    eta = np.maximum(init.fitted, max(ETA_FLOOR, 1e-3 * float(np.sqrt(y.mean()))))
    problem = LmmProblem(design, eta + (y - eta ** 2) / (2.0 * eta), random,
                         pw * 4.0 * eta ** 2)
    theta = identity_theta(problem.terms) if start is None else np.asarray(start, float)
    sweeps, evals, converged = 0, 0, False
    outer = 0
    for outer in range(1, max_outer + 1):
        eta, k, ok = _pirls(problem, theta, eta, y, pw, eta_tol, max_outer)
        sweeps += k
        fit = fit_lmm(None, random, None, problem=problem, start=theta, max_evals=max_evals,
                      refine=True)
        evals += fit.n_evals
        dtheta = float(np.max(np.abs(fit.theta - theta))) if theta.size else 0.0
        theta = fit.theta
        if dtheta < theta_tol:
            converged = fit.converged or dtheta == 0.0
            break
    eta, k, ok = _pirls(problem, theta, eta, y, pw, eta_tol, max_outer)
    sweeps += k
    converged = converged and ok
    out = finish_fit(problem, theta, problem.deviance(theta), evals, converged, link="sqrt")
    out.message = f"{sweeps} PIRLS sweeps, {outer} variance-component updates"
    return out


def glmm_sqrt_at_theta(design, random: RandomSpec, y, theta, *, prior_weights=None,
                       max_sweeps: int = 200, eta_tol: float = 1e-6) -> MixedFit:
    """PIRLS for the sqrt-link model at a fixed theta (no variance updates)."""
    y = np.asarray(y, dtype=float)
    X = design.matrix if isinstance(design, DesignMatrix) else np.asarray(design, float)
    pw = np.ones(y.size) if prior_weights is None else np.asarray(prior_weights, float)
    init = ols_fit(X, np.sqrt(y))
    eta = np.maximum(init.fitted, max(ETA_FLOOR, 1e-3 * float(np.sqrt(y.mean()))))
    problem = LmmProblem(design, eta + (y - eta ** 2) / (2.0 * eta), random,
                         pw * 4.0 * eta ** 2)
    theta = np.asarray(theta, float)
    eta, k, ok = _pirls(problem, theta, eta, y, pw, eta_tol, max_sweeps)
    out = finish_fit(problem, theta, problem.deviance(theta), 0, ok, link="sqrt")
    out.message = f"{k} PIRLS sweeps at fixed variance components"
    return out
