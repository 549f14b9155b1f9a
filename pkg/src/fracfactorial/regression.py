"""Least squares on +-1 coded factorial design matrices.

OLS with classical and HC2 variances, greedy removal of collinear columns,
and the exact effect decomposition implied by each coefficient. With every
run occupied and a treatment-only saturated model, ``2 * beta`` reproduces
the Neyman estimate and ``4 * HC2`` the Neyman variance estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .design import (
    I,
    Design,
    EffectWord,
    canonical_words,
    contrast_vector,
    partial_alias_decomposition,
    run_index,
)
from .errors import InvalidArgument, RedundantColumn, UnsupportedModel
from .estimation import EffectEstimate, confidence_interval

COLLINEAR_TOL = 1e-10
LEVERAGE_TOL = 1e-10


@dataclass
class DesignMatrix:
    """Model matrix with bookkeeping.

    ``words[c]`` is the effect word behind column ``c`` (the intercept is
    ``I``) or ``None`` for a covariate column. ``runs`` holds each unit's
    run so coefficients can be mapped back to run-mean weights.
    """

    values: np.ndarray
    columns: list
    words: list
    runs: np.ndarray

    @property
    def has_covariates(self) -> bool:
        return any(w is None for w in self.words)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def treatment_matrix(runs, words) -> np.ndarray:
    runs = np.asarray(runs)
    return np.column_stack([contrast_vector(w, runs) for w in words]).astype(float)


def saturated_matrix(dataset, design: Design, words=None, covariates=(), baselines=None) -> DesignMatrix:
    """Intercept, one +-1 column per word and optional covariate columns.

    ``words`` defaults to one representative per alias class for a regular
    design and to every word for an incomplete one (collinear columns are
    then left to :func:`ols_fit`). Two words from one alias class raise
    :class:`RedundantColumn`.
    """
    dataset.run_positions(design)  # foreign-run check
    if words is None:
        words = design.estimable_words() if design.is_regular else canonical_words(design.k)
    words = [w if isinstance(w, EffectWord) else EffectWord.parse(str(w)) for w in words]
    if not any(w.is_mean for w in words):
        words = [I] + words
    else:
        words = [w for w in words if w.is_mean][:1] + [w for w in words if not w.is_mean]
    if design.is_regular:
        seen = {}
        for w in words:
            key = design.alias_table.representative(w).mask
            if key in seen:
                raise RedundantColumn(f"{w} is aliased with {seen[key]} in this design")
            seen[key] = w
    X = treatment_matrix(dataset.runs, words)
    names = ["(Intercept)" if w.is_mean else str(w) for w in words]
    col_words = list(words)
    covariates = list(covariates)
    if covariates:
        C, cnames = dataset.covariate_matrix(covariates, baselines)
        X = np.column_stack([X, C])
        names += cnames
        col_words += [None] * len(cnames)
    return DesignMatrix(X, names, col_words, np.asarray(dataset.runs))


def select_columns(X: np.ndarray, tol: float = COLLINEAR_TOL) -> list:
    """Indices of columns kept by left-to-right Gram-Schmidt; a column whose
    residual norm is below ``tol`` times the largest pivot so far is
    dropped."""
    X = np.asarray(X, dtype=float)
    basis = []
    kept = []
    largest = 0.0
    for j in range(X.shape[1]):
        v = X[:, j].copy()
        for _ in range(2):  # re-orthogonalise once for stability
            for q in basis:
                v -= (q @ v) * q
        pivot = float(np.linalg.norm(v))
        if pivot <= tol * max(largest, float(np.linalg.norm(X[:, j])), 1e-300) or pivot == 0.0:
            continue
        largest = max(largest, pivot)
        basis.append(v / pivot)
        kept.append(j)
    return kept


@dataclass
class RegressionFit:
    columns: list
    kept: list
    coef: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    leverage: np.ndarray
    classical_cov: np.ndarray | None
    hc2_cov: np.ndarray | None
    hc2_unavailable: bool
    df_resid: int
    B: np.ndarray = field(repr=False)
    design_matrix: DesignMatrix | None = field(default=None, repr=False)

    @property
    def dropped(self) -> list:
        return [c for i, c in enumerate(self.columns) if i not in self.kept]

    def _pos(self, key) -> int:
        if isinstance(key, EffectWord):
            key = "(Intercept)" if key.is_mean else str(key.positive())
        if isinstance(key, str):
            key = self.columns.index(key)
        if key not in self.kept:
            raise InvalidArgument(f"column {self.columns[key]} was dropped")
        return self.kept.index(key)

    def coefficient(self, key) -> float:
        return float(self.coef[self.kept[self._pos(key)]])

    def classical_variance(self, key):
        if self.classical_cov is None:
            return None
        i = self._pos(key)
        return float(self.classical_cov[i, i])

    def hc2_variance(self, key):
        if self.hc2_cov is None:
            return None
        i = self._pos(key)
        return float(self.hc2_cov[i, i])


def ols_fit(X, y, columns=None, tol: float = COLLINEAR_TOL) -> RegressionFit:
    """Least squares with greedy collinear-column removal.

    Classical variance uses ``RSS / (n - rank)``. HC2 uses
    ``Omega = diag(e_i^2 / (1 - h_ii))``; if any unit has leverage one the
    HC2 matrix is undefined and ``hc2_unavailable`` is set.
    """
    dm = X if isinstance(X, DesignMatrix) else None
    Xv = np.asarray(dm.values if dm is not None else X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = Xv.shape
    if y.shape != (n,):
        raise InvalidArgument("y must have one entry per row of X")
    if columns is None:
        columns = dm.columns if dm is not None else [f"x{j}" for j in range(p)]
    kept = select_columns(Xv, tol)
    if not kept:
        raise InvalidArgument("design matrix has no usable columns")
    Xk = Xv[:, kept]
    Q, R = np.linalg.qr(Xk)
    XtX_inv = np.linalg.inv(R) @ np.linalg.inv(R).T
    B = XtX_inv @ Xk.T
    beta = B @ y
    fitted = Xk @ beta
    resid = y - fitted
    lev = np.clip(np.sum(Q * Q, axis=1), 0.0, 1.0)
    rank = len(kept)
    df = n - rank
    classical = None
    if df > 0:
        classical = XtX_inv * (float(resid @ resid) / df)
    hc2 = None
    unavailable = bool(np.any(lev >= 1.0 - LEVERAGE_TOL))
    if not unavailable:
        omega = resid**2 / (1.0 - lev)
        hc2 = (B * omega) @ B.T
    coef = np.full(p, np.nan)
    coef[kept] = beta
    return RegressionFit(list(columns), kept, coef, resid, fitted, lev, classical, hc2,
                         unavailable, df, B, dm)


def _fraction_inverse(M) -> list:
    n = len(M)
    A = [[Fraction(v) for v in row] + [Fraction(int(i == j)) for j in range(n)] for i, row in enumerate(M)]
    for c in range(n):
        piv = next((r for r in range(c, n) if A[r][c] != 0), None)
        if piv is None:
            raise InvalidArgument("matrix is singular")
        A[c], A[piv] = A[piv], A[c]
        inv = 1 / A[c][c]
        A[c] = [v * inv for v in A[c]]
        for r in range(n):
            if r != c and A[r][c] != 0:
                f = A[r][c]
                A[r] = [a - f * b for a, b in zip(A[r], A[c])]
    return [row[n:] for row in A]


def run_weights(fit: RegressionFit, key) -> dict:
    """Exact per-run weights of a coefficient: ``beta = sum_r w_r Ybar(r)``.

    Computed in rational arithmetic from run counts, keyed by lattice index.
    """
    dm = fit.design_matrix
    if dm is None:
        raise InvalidArgument("fit does not carry its design matrix")
    if dm.has_covariates:
        raise UnsupportedModel("implied estimands are defined only for treatment-only models")
    pos = fit._pos(key)
    words = [dm.words[j] for j in fit.kept]
    runs, counts = np.unique(dm.runs, axis=0, return_counts=True)
    rows = [[int(v) for v in contrast_vector(w, runs)] for w in words]  # p x R
    p = len(words)
    xtx = [[sum(counts[r] * rows[a][r] * rows[b][r] for r in range(len(runs))) for b in range(p)]
           for a in range(p)]
    inv_row = _fraction_inverse(xtx)[pos]
    out = {}
    for r, run in enumerate(runs):
        w = int(counts[r]) * sum(inv_row[a] * rows[a][r] for a in range(p))
        if w != 0:
            out[run_index(run)] = w
    return out


def implied_estimand(fit: RegressionFit, key, tau_scale: bool = True) -> dict:
    """Effect decomposition of a coefficient, exact.

    Non-intercept coefficients are doubled onto the effect scale when
    ``tau_scale`` is set; the intercept is already on the mean scale.
    """
    weights = run_weights(fit, key)
    k = fit.design_matrix.runs.shape[1]
    lattice = [Fraction(0)] * (2**k)
    for j, w in weights.items():
        lattice[j] = w
    word = fit.design_matrix.words[fit.kept[fit._pos(key)]]
    if tau_scale and not word.is_mean:
        lattice = [2 * w for w in lattice]
    return partial_alias_decomposition(lattice, k)


def fit_estimates(fit: RegressionFit, alpha: float = 0.05, words=None) -> list:
    """Treatment coefficients as effect estimates on the tau scale
    (``2 beta``, ``4 HC2``); the intercept is reported as the mean."""
    dm = fit.design_matrix
    if dm is None:
        raise InvalidArgument("fit does not carry its design matrix")
    out = []
    for j in fit.kept:
        w = dm.words[j]
        if w is None or (words is not None and w not in words):
            continue
        f = 1.0 if w.is_mean else 2.0
        est = f * fit.coefficient(dm.columns[j])
        var = fit.hc2_variance(dm.columns[j])
        var = None if var is None else f * f * var
        ci = confidence_interval(est, var, alpha) if var is not None else None
        note = "dropped: " + ";".join(fit.dropped) if fit.dropped else ""
        out.append(EffectEstimate(w, est, var, (w,), ci, "regression", alpha, note=note))
    return out


def covariate_adjusted_fit(dataset, design: Design, covariates, words=None, baselines=None) -> RegressionFit:
    dm = saturated_matrix(dataset, design, words, covariates, baselines)
    return ols_fit(dm, dataset.outcome)
