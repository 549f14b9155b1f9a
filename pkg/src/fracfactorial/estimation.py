"""Neyman-style estimation of factorial effects.

Point estimates, conservative variance and covariance estimates, normal
intervals and Wald regions for full, fractional and incomplete designs, plus
an exact enumeration oracle over a complete science table that is used to
check all of the above.
"""

from __future__ import annotations

import csv
import itertools
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import stats

from .design import (
    Design,
    EffectWord,
    canonical_words,
    contrast_vector,
    format_estimand,
    full_factorial_runs,
    partial_alias_decomposition,
    run_index,
    run_label,
)
from .errors import (
    BudgetExceeded,
    CannotEstimate,
    InvalidArgument,
    SingularCovariance,
    UndefinedComponents,
    VarianceUnavailable,
)

ENUMERATION_BUDGET = 10**7


# ---------------------------------------------------------------------------
# group summaries
# ---------------------------------------------------------------------------

@dataclass
class GroupSummary:
    """Per-run count, mean and sample variance (divisor n - 1).

    Arrays follow the run order of ``design``. Empty runs have NaN mean,
    runs with fewer than two units have NaN variance.
    """

    design: Design
    n: np.ndarray
    mean: np.ndarray
    var: np.ndarray

    @property
    def total(self) -> int:
        return int(self.n.sum())

    @property
    def empty_runs(self) -> list:
        return [tuple(int(v) for v in self.design.runs[j]) for j in np.flatnonzero(self.n == 0)]

    @property
    def single_runs(self) -> list:
        return [tuple(int(v) for v in self.design.runs[j]) for j in np.flatnonzero(self.n == 1)]

    def require_occupied(self, weights=None):
        mask = self.n == 0
        if weights is not None:
            mask &= np.asarray(weights) != 0
        if mask.any():
            j = int(np.flatnonzero(mask)[0])
            raise CannotEstimate(f"run {run_label(self.design.runs[j])} has no units")

    def require_variances(self, weights=None):
        self.require_occupied(weights)
        mask = self.n < 2
        if weights is not None:
            mask &= np.asarray(weights) != 0
        if mask.any():
            bad = ", ".join(run_label(self.design.runs[j]) for j in np.flatnonzero(mask))
            raise VarianceUnavailable(f"runs with a single unit leave s^2 undefined: {bad}")


def summarize_outcomes(design: Design, positions, outcome) -> GroupSummary:
    """Summary from run positions (indices into ``design.runs``)."""
    positions = np.asarray(positions, dtype=np.int64)
    y = np.asarray(outcome, dtype=float)
    J = design.n_runs
    n = np.bincount(positions, minlength=J)
    sums = np.bincount(positions, weights=y, minlength=J)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(n > 0, sums / np.maximum(n, 1), np.nan)
        dev2 = np.bincount(positions, weights=(y - mean[positions]) ** 2, minlength=J)
        var = np.where(n > 1, dev2 / np.maximum(n - 1, 1), np.nan)
    return GroupSummary(design, n.astype(np.int64), mean, var)


def summarize_groups(dataset, design: Design) -> GroupSummary:
    """Counts, means and variances of the outcome per design run.

    Raises :class:`ForeignRun` if a unit sits in a run outside the design.
    """
    return summarize_outcomes(design, dataset.run_positions(design), dataset.outcome)


# ---------------------------------------------------------------------------
# point and variance estimates
# ---------------------------------------------------------------------------

@dataclass
class EffectEstimate:
    word: EffectWord | None
    estimate: float
    variance: float | None = None
    alias_class: tuple = ()
    ci: tuple | None = None
    method: str = "neyman"
    alpha: float = 0.05
    decomposition: dict = field(default_factory=dict)
    note: str = ""

    @property
    def stderr(self):
        return None if self.variance is None else math.sqrt(self.variance)

    @property
    def label(self) -> str:
        return str(self.word) if self.word is not None else "custom"

    def alias_text(self) -> str:
        if self.decomposition:
            return format_estimand(self.decomposition)
        return " = ".join(str(w) for w in self.alias_class)


def _scaled_contrast(design: Design, word: EffectWord):
    return float(design.effect_scale(word)), design.contrast(word).astype(float)


def estimate_effect(summary: GroupSummary, word: EffectWord) -> EffectEstimate:
    """``c * g^T Ybar`` with ``c = 2/J`` (``1/J`` for the mean) over the
    design's ``J`` runs. Point estimate only."""
    summary.require_occupied()
    c, g = _scaled_contrast(summary.design, word)
    est = c * float(g @ summary.mean)
    return EffectEstimate(word, est, alias_class=summary.design.alias_class(word))


def neyman_variance(summary: GroupSummary, word: EffectWord) -> float:
    """Conservative ``c^2 * sum_j s_j^2 / n_j``; the same for every non-mean
    word of a design."""
    summary.require_variances()
    c = float(summary.design.effect_scale(word))
    return c * c * float(np.sum(summary.var / summary.n))


def neyman_covariance(summary: GroupSummary, word_a: EffectWord, word_b: EffectWord) -> float:
    """``c_a c_b * (sum over agreeing runs - sum over disagreeing runs)`` of
    ``s_j^2 / n_j``. Not guaranteed to be conservative."""
    summary.require_variances()
    design = summary.design
    ca, ga = _scaled_contrast(design, word_a)
    cb, gb = _scaled_contrast(design, word_b)
    return ca * cb * float(np.sum(ga * gb * summary.var / summary.n))


def covariance_matrix(summary: GroupSummary, words) -> np.ndarray:
    summary.require_variances()
    design = summary.design
    scales = np.array([float(design.effect_scale(w)) for w in words])
    G = np.array([design.contrast(w) for w in words], dtype=float) * scales[:, None]
    return (G * (summary.var / summary.n)) @ G.T


def confidence_interval(estimate: float, variance: float, alpha: float = 0.05) -> tuple:
    """Normal interval ``estimate +- z_{alpha/2} sqrt(variance)``."""
    if not 0 < alpha < 1:
        raise InvalidArgument("alpha must lie in (0, 1)")
    if variance < 0:
        raise InvalidArgument("variance must be non-negative")
    half = stats.norm.ppf(1 - alpha / 2) * math.sqrt(variance)
    return (estimate - half, estimate + half)


def estimate_effects(summary: GroupSummary, words=None, alpha: float = 0.05,
                     with_variance: bool = True) -> list:
    """Estimates for ``words`` (default: every estimable non-mean word)."""
    design = summary.design
    if words is None:
        if design.is_regular:
            words = [w for w in design.estimable_words() if not w.is_mean]
        else:
            raise InvalidArgument("words are required for an incomplete design")
    out = []
    for w in words:
        e = estimate_effect(summary, w)
        e.alpha = alpha
        if with_variance:
            e.variance = neyman_variance(summary, w)
            e.ci = confidence_interval(e.estimate, e.variance, alpha)
        out.append(e)
    return out


@dataclass
class WaldRegion:
    estimates: np.ndarray
    covariance: np.ndarray
    statistic: float
    threshold: float
    df: int
    alpha: float
    null: np.ndarray

    @property
    def contains_null(self) -> bool:
        return self.statistic <= self.threshold

    @property
    def p_value(self) -> float:
        return float(stats.chi2.sf(self.statistic, self.df))


def wald_region(estimates, covariance, alpha: float = 0.05, null=None, df: int | None = None) -> WaldRegion:
    """Chi-square Wald region ``(t - mu)' V^-1 (t - mu) <= q_{df, 1-alpha}``.

    ``df`` defaults to the vector length.
    """
    t = np.atleast_1d(np.asarray(estimates, dtype=float))
    V = np.atleast_2d(np.asarray(covariance, dtype=float))
    if V.shape != (t.size, t.size):
        raise InvalidArgument("covariance shape does not match the estimates")
    if not np.allclose(V, V.T, rtol=1e-10, atol=1e-14):
        raise InvalidArgument("covariance matrix must be symmetric")
    if not 0 < alpha < 1:
        raise InvalidArgument("alpha must lie in (0, 1)")
    mu = np.zeros_like(t) if null is None else np.asarray(null, dtype=float)
    eig = np.linalg.eigvalsh(V)
    if eig.min() <= 1e-12 * max(eig.max(), 0.0) or eig.max() <= 0:
        raise SingularCovariance("covariance estimate is singular or not positive definite")
    d = t - mu
    stat = float(d @ np.linalg.solve(V, d))
    df = t.size if df is None else int(df)
    return WaldRegion(t, V, stat, float(stats.chi2.ppf(1 - alpha, df)), df, alpha, mu)


# ---------------------------------------------------------------------------
# incomplete designs
# ---------------------------------------------------------------------------

def incomplete_weights(word: EffectWord, runs, k: int) -> np.ndarray:
    """The lattice contrast of ``word`` with zeros outside ``runs``."""
    g = contrast_vector(word, full_factorial_runs(k)).astype(np.int64)
    keep = np.zeros(2**k, dtype=bool)
    keep[[run_index(r) for r in np.asarray(runs)]] = True
    g[~keep] = 0
    return g


def incomplete_estimate(summary: GroupSummary, weights, word: EffectWord | None = None,
                        scale=None, alpha: float = 0.05) -> EffectEstimate:
    """Estimate ``scale * gdot^T Ybar`` for a weight vector over the full
    2^k lattice, zero on excluded runs.

    ``scale`` defaults to ``2 / #nonzero weights``. The variance estimate is
    ``scale^2 * sum gdot_j^2 s_j^2 / n_j`` when every weighted run has two or
    more units; otherwise it is left as ``None``. The exact effect
    decomposition of the estimand is attached.
    """
    design = summary.design
    k = design.k
    w = list(weights)
    if len(w) != 2**k:
        raise InvalidArgument(f"need {2**k} weights over the full lattice")
    nz = [j for j, x in enumerate(w) if x != 0]
    if not nz:
        raise InvalidArgument("all weights are zero")
    scale = Fraction(2, len(nz)) if scale is None else Fraction(scale)

    lattice_pos = {int(i): j for j, i in enumerate(design.lattice_indices())}
    local = np.zeros(design.n_runs)
    for j in nz:
        if j not in lattice_pos:
            raise CannotEstimate(f"run {run_label(full_factorial_runs(k)[j])} is not in the design")
        local[lattice_pos[j]] = float(w[j])
    summary.require_occupied(local)
    used = local != 0
    est = float(scale) * float(local[used] @ summary.mean[used])

    variance = ci = None
    note = ""
    try:
        summary.require_variances(local)
        variance = float(scale) ** 2 * float(np.sum(local[used] ** 2 * summary.var[used] / summary.n[used]))
        ci = confidence_interval(est, variance, alpha)
    except VarianceUnavailable as exc:
        note = str(exc)
    decomposition = partial_alias_decomposition([scale * Fraction(x) for x in w], k)
    return EffectEstimate(word, est, variance, (), ci, "incomplete", alpha, decomposition, note)


# ---------------------------------------------------------------------------
# science tables and finite-population quantities
# ---------------------------------------------------------------------------

_SCIENCE_HEADER = re.compile(r"^y\[([^\]]*)\]$")


@dataclass
class ScienceTable:
    """Complete potential outcomes: ``values[i, j]`` is unit ``i`` under
    ``runs[j]``. For simulation and oracle checks only."""

    values: np.ndarray
    runs: np.ndarray

    def __post_init__(self):
        self.runs = np.asarray(self.runs, dtype=np.int8)
        vals = np.asarray(self.values)
        if vals.dtype.kind not in "iu":
            vals = vals.astype(float)
            if np.isnan(vals).any():
                raise InvalidArgument("science table has missing entries")
        self.values = vals
        if vals.ndim != 2 or vals.shape[1] != self.runs.shape[0]:
            raise InvalidArgument("science table needs one column per run")

    @classmethod
    def full(cls, values, k: int) -> "ScienceTable":
        return cls(values, full_factorial_runs(k))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.runs.shape[1]

    @property
    def is_integer(self) -> bool:
        return self.values.dtype.kind in "iu"

    def columns(self, design: Design) -> np.ndarray:
        """Columns for the design's runs, in design order."""
        pos = {tuple(int(v) for v in r): j for j, r in enumerate(self.runs)}
        try:
            idx = [pos[tuple(int(v) for v in r)] for r in design.runs]
        except KeyError as exc:
            raise InvalidArgument(f"science table lacks run {exc.args[0]}") from None
        return self.values[:, idx]

    def lattice(self) -> np.ndarray:
        """Columns in full canonical order; all 2^k runs must be present."""
        return self.columns(Design.full(self.k))


def load_science_table(path) -> ScienceTable:
    """Read a delimited file whose outcome columns are named like
    ``y[-1,-1,+1]``; other columns are ignored."""
    text = Path(path).read_text(encoding="utf-8")
    delim = "\t" if text.split("\n", 1)[0].count("\t") > text.split("\n", 1)[0].count(",") else ","
    rows = list(csv.reader(text.splitlines(), delimiter=delim))
    header = [h.strip() for h in rows[0]]
    cols, runs = [], []
    for i, h in enumerate(header):
        m = _SCIENCE_HEADER.match(h.replace(" ", ""))
        if m:
            cols.append(i)
            runs.append([int(v) for v in m.group(1).split(",")])
    if not cols:
        raise InvalidArgument("no y[...] columns found")
    raw = [[r[i].strip() for i in cols] for r in rows[1:] if any(c.strip() for c in r)]
    try:
        values = np.array([[int(v) for v in r] for r in raw], dtype=np.int64)
    except ValueError:
        values = np.array([[float(v) for v in r] for r in raw], dtype=float)
    return ScienceTable(values, np.array(runs))


def _sample_cov(a, b, exact: bool):
    """Sample covariance with divisor n - 1; ``a`` and ``b`` are sequences."""
    n = len(a)
    if exact:
        ma, mb = sum(a) / n, sum(b) / n
        return sum((x - ma) * (y - mb) for x, y in zip(a, b)) / (n - 1)
    return float(np.cov(np.asarray(a, float), np.asarray(b, float), ddof=1)[0, 1])


@dataclass
class FiniteComponents:
    """Finite-population variance components for a design.

    ``run_variances[j]`` is ``S^2(z_j)`` over the design runs.
    ``effect_cov`` holds ``S^2_{k,k'}`` for the unit-level effects over the
    full lattice (``None`` when the table does not cover it) and
    ``aliased_cov`` holds ``S~^2_{k,k'}`` for the aliased unit-level effects
    ``c * g*^T Y*_i``. Both are keyed by pairs of words from ``words``.
    Values are exact Fractions for integer tables.
    """

    design: Design
    words: list
    run_variances: list
    aliased_cov: dict
    effect_cov: dict | None
    n: int

    def S2_tilde(self, a: EffectWord, b: EffectWord | None = None):
        return self.aliased_cov[(a.positive(), (b or a).positive())]

    def S2_effect(self, a: EffectWord, b: EffectWord | None = None):
        if self.effect_cov is None:
            raise UndefinedComponents("science table does not cover the full lattice")
        return self.effect_cov[(a.positive(), (b or a).positive())]

    def randomization_covariance(self, a: EffectWord, b: EffectWord, group_sizes):
        """``c_a c_b sum_j g_aj g_bj S^2(z_j)/n_j - S~^2_{a,b}/n``."""
        design = self.design
        pa, pb = a.positive(), b.positive()
        ga, gb = design.contrast(pa), design.contrast(pb)
        tilde = self.S2_tilde(pa, pb)
        ca, cb = design.effect_scale(pa), design.effect_scale(pb)
        if not isinstance(tilde, Fraction):
            ca, cb = float(ca), float(cb)
        s = sum(int(x) * int(y) * v / int(nj) for x, y, v, nj in zip(ga, gb, self.run_variances, group_sizes))
        return a.sign * b.sign * (ca * cb * s - tilde / self.n)

    def randomization_variance(self, word: EffectWord, group_sizes):
        return self.randomization_covariance(word, word, group_sizes)


def finite_population_components(science: ScienceTable, design: Design, words=None) -> FiniteComponents:
    """Exact (integer tables) or float finite-population components."""
    if science.n < 2:
        raise UndefinedComponents("need at least two units")
    exact = science.is_integer
    if words is None:
        words = design.estimable_words() if design.is_regular else canonical_words(design.k)
    words = [w.positive() for w in words]

    Y = science.columns(design)
    conv = (lambda x: Fraction(int(x))) if exact else float
    cols = [[conv(v) for v in Y[:, j]] for j in range(Y.shape[1])]
    run_var = [_sample_cov(c, c, exact) for c in cols]

    def unit_effects(Ymat, dsg):
        out = {}
        for w in words:
            c = dsg.effect_scale(w)
            c = c if exact else float(c)
            g = dsg.contrast(w)
            out[w] = [c * sum(conv(y) if gj > 0 else -conv(y) for gj, y in zip(g, row)) for row in Ymat]
        return out

    def pair_cov(eff):
        return {(a, b): _sample_cov(eff[a], eff[b], exact) for a in words for b in words}

    aliased = pair_cov(unit_effects(Y, design))
    effect = None
    full = Design.full(design.k)
    if all(any((r == s).all() for s in science.runs) for r in full.runs):
        effect = pair_cov(unit_effects(science.columns(full), full))
    return FiniteComponents(design, words, run_var, aliased, effect, science.n)


# ---------------------------------------------------------------------------
# enumeration oracle
# ---------------------------------------------------------------------------

def assignment_count(group_sizes) -> int:
    n = sum(group_sizes)
    out = math.factorial(n)
    for s in group_sizes:
        out //= math.factorial(s)
    return out


def enumerate_assignments(group_sizes, budget: int = ENUMERATION_BUDGET) -> np.ndarray:
    """Every assignment of ``sum(group_sizes)`` units to groups with the
    given sizes, once each. Returns an ``(A, n)`` array of group indices;
    the first row is the identity assignment (units in group order)."""
    sizes = [int(s) for s in group_sizes]
    if any(s < 0 for s in sizes):
        raise InvalidArgument("group sizes must be non-negative")
    count = assignment_count(sizes)
    if count > budget:
        raise BudgetExceeded(f"{count} assignments exceed the budget of {budget}")
    n = sum(sizes)
    out = np.empty((count, n), dtype=np.int16)
    row = 0

    def fill(free, g, partial):
        nonlocal row
        if g == len(sizes) - 1:
            partial = partial.copy()
            partial[list(free)] = g
            out[row] = partial
            row += 1
            return
        for chosen in itertools.combinations(free, sizes[g]):
            nxt = partial.copy()
            nxt[list(chosen)] = g
            fill(tuple(i for i in free if i not in chosen), g + 1, nxt)

    if sizes:
        fill(tuple(range(n)), 0, np.zeros(n, dtype=np.int16))
    return out


@dataclass
class OracleMoments:
    """Exact randomization moments of ``(tau_hat(w) for w in words)``.

    ``cov`` is the covariance of the estimators over assignments and
    ``mean_estimated_cov`` the expectation of the Neyman covariance
    estimator (``nan``/``None`` when some group has a single unit).
    """

    words: list
    n_assignments: int
    mean: list
    cov: list
    mean_estimated_cov: list | None

    @property
    def expectation(self):
        return self.mean[0]

    @property
    def variance(self):
        return self.cov[0][0]

    @property
    def expected_variance_estimate(self):
        return None if self.mean_estimated_cov is None else self.mean_estimated_cov[0][0]


def _to_int_sum(a) -> int:
    return int(np.sum(np.asarray(a, dtype=object)))


def oracle_randomization_moments(science: ScienceTable, design: Design, group_sizes, words,
                                 budget: int = ENUMERATION_BUDGET) -> OracleMoments:
    """Enumerate every assignment with the given group sizes and return the
    exact moments of the effect estimators.

    Integer tables are handled in exact rational arithmetic; other tables in
    floating point.
    """
    if isinstance(words, EffectWord):
        words = [words]
    words = list(words)
    sizes = np.asarray(group_sizes, dtype=np.int64)
    if sizes.shape != (design.n_runs,):
        raise InvalidArgument("one group size per design run is required")
    if sizes.sum() != science.n:
        raise InvalidArgument("group sizes must add up to the number of units")
    if (sizes < 1).any():
        raise CannotEstimate("every run needs at least one unit")
    assign = enumerate_assignments(sizes, budget)
    A = assign.shape[0]
    Y = science.columns(design)
    J = design.n_runs
    onehot = assign[:, :, None] == np.arange(J)[None, None, :]
    exact = science.is_integer
    dt = np.int64 if exact else float
    S = np.einsum("anj,nj->aj", onehot.astype(dt), Y.astype(dt))
    Q = np.einsum("anj,nj->aj", onehot.astype(dt), (Y * Y).astype(dt))
    G = np.array([design.contrast(w) for w in words], dtype=np.int64)
    scales = [design.effect_scale(w) for w in words]
    with_var = bool((sizes >= 2).all())

    if exact:
        D = math.lcm(*[int(s) for s in sizes])
        T = (S * (D // sizes)[None, :]) @ G.T  # tau_hat = c * T / D
        sumT = [_to_int_sum(T[:, i]) for i in range(len(words))]
        mean = [scales[i] * Fraction(sumT[i], A * D) for i in range(len(words))]
        cov = [[scales[i] * scales[l] * Fraction(A * _to_int_sum(T[:, i].astype(object) * T[:, l].astype(object))
                                                 - sumT[i] * sumT[l], A * A * D * D)
                for l in range(len(words))] for i in range(len(words))]
        est_cov = None
        if with_var:
            dens = sizes * sizes * (sizes - 1)
            M = math.lcm(*[int(d) for d in dens])
            R = (sizes[None, :] * Q - S * S) * (M // dens)[None, :]  # s^2/n = R / M
            colsum = [_to_int_sum(R[:, j]) for j in range(J)]
            est_cov = [[scales[i] * scales[l] * Fraction(sum(int(G[i, j] * G[l, j]) * colsum[j] for j in range(J)), A * M)
                        for l in range(len(words))] for i in range(len(words))]
        return OracleMoments(words, A, mean, cov, est_cov)

    c = np.array([float(s) for s in scales])
    tau = (S / sizes[None, :]) @ G.T * c[None, :]
    mean = [math.fsum(tau[:, i]) / A for i in range(len(words))]
    cen = tau - np.array(mean)[None, :]
    cov = [[math.fsum(cen[:, i] * cen[:, l]) / A for l in range(len(words))] for i in range(len(words))]
    est_cov = None
    if with_var:
        s2 = (Q - S * S / sizes[None, :]) / (sizes - 1)[None, :]
        r = (s2 / sizes[None, :]).mean(axis=0)
        est_cov = [[c[i] * c[l] * math.fsum(G[i] * G[l] * r) for l in range(len(words))] for i in range(len(words))]
    return OracleMoments(words, A, mean, cov, est_cov)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("word", "estimate", "variance", "stderr", "ci_low", "ci_high", "alias_class", "method")


def _fmt(x) -> str:
    if x is None:
        return "NA"
    return repr(float(x))


def effect_report_rows(estimates, extra=None):
    """Header plus one row per estimate; ``extra`` maps column name to a
    per-estimate list of values."""
    extra = extra or {}
    yield list(REPORT_COLUMNS) + list(extra)
    for i, e in enumerate(estimates):
        lo, hi = e.ci if e.ci is not None else (None, None)
        yield [e.label, _fmt(e.estimate), _fmt(e.variance), _fmt(e.stderr), _fmt(lo), _fmt(hi),
               e.alias_text(), e.method] + [str(v[i]) for v in extra.values()]


def write_effect_report(path, estimates, extra=None, delimiter: str = ",") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, delimiter=delimiter, lineterminator="\n").writerows(effect_report_rows(estimates, extra))
