"""Covariate balance across treatment groups.

Wilks' lambda from between- and within-group scatter, permutation p-values,
standardized mean differences, greedy sequential trimming and simple
two-group contrasts with their implied effect decomposition.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from .design import Design, partial_alias_decomposition, run_index, run_label
from .errors import CannotTest, InvalidArgument, SingularWithinScatter, UndefinedDifference
from .estimation import ENUMERATION_BUDGET, confidence_interval, enumerate_assignments

CHUNK = 2048


def _groups(labels):
    labels = list(labels)
    keys = sorted(set(labels))
    index = {k: i for i, k in enumerate(keys)}
    return keys, np.array([index[v] for v in labels], dtype=np.int64)


def scatter_matrices(X, codes, n_groups):
    """Between (H) and within (E) scatter matrices."""
    X = np.asarray(X, dtype=float)
    n = np.bincount(codes, minlength=n_groups)
    means = np.zeros((n_groups, X.shape[1]))
    np.add.at(means, codes, X)
    means /= n[:, None]
    grand = X.mean(axis=0)
    d = means - grand
    H = (d * n[:, None]).T @ d
    R = X - means[codes]
    E = R.T @ R
    return H, E, means


@dataclass
class BalanceReport:
    H: np.ndarray
    E: np.ndarray
    eigenvalues: np.ndarray
    wilks: float
    wilks_eigen: float
    p_value: float | None
    method: str | None
    draws: int | None
    seed: int | None
    groups: list
    group_sizes: np.ndarray
    group_means: np.ndarray
    covariates: list = field(default_factory=list)

    def rows(self):
        yield ["statistic", "value"]
        yield ["wilks", repr(self.wilks)]
        yield ["wilks_eigen", repr(self.wilks_eigen)]
        yield ["p_value", "NA" if self.p_value is None else repr(self.p_value)]
        yield ["method", self.method or "NA"]
        yield ["draws", "NA" if self.draws is None else str(self.draws)]
        yield ["seed", "NA" if self.seed is None else str(self.seed)]

    def means_rows(self):
        yield ["group", "n", *self.covariates]
        for g, n, m in zip(self.groups, self.group_sizes, self.group_means):
            label = run_label(g) if isinstance(g, tuple) else str(g)
            yield [label, str(int(n)), *(repr(float(v)) for v in m)]


def _wilks_batch(X, assign, n, T_det_log):
    """Wilks for a batch of label assignments; total scatter is fixed so
    only the between-group part is recomputed."""
    Xc = X - X.mean(axis=0)
    A, N = assign.shape
    G = len(n)
    m = X.shape[1]
    flat = (np.arange(A)[:, None] * G + assign).ravel()
    S = np.empty((A, G, m))
    for c in range(m):
        S[:, :, c] = np.bincount(flat, weights=np.tile(Xc[:, c], A), minlength=A * G).reshape(A, G)
    H = np.einsum("agm,agl,g->aml", S, S, 1.0 / n)
    T = Xc.T @ Xc
    sign, logdet = np.linalg.slogdet(T[None] - H)
    out = np.where(sign > 0, np.exp(logdet - T_det_log), 0.0)
    return out


def manova_wilks(X, labels, draws: int = 2000, seed: int | None = None, method: str = "permutation",
                 covariates=None, budget: int = ENUMERATION_BUDGET) -> BalanceReport:
    """Wilks' lambda ``|E| / |H + E|`` and its p-value.

    ``method`` is ``"permutation"`` (seeded label shuffles, add-one
    p-value), ``"exact"`` (every relabelling with fixed group sizes),
    ``"bartlett"`` (chi-square approximation) or ``None`` (no p-value).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    keys, codes = _groups(labels)
    if len(codes) != X.shape[0]:
        raise InvalidArgument("one label per row of X is required")
    G = len(keys)
    n = np.bincount(codes, minlength=G)
    if G < 2:
        raise CannotTest("need at least two groups")
    if X.shape[1] < 1:
        raise InvalidArgument("need at least one covariate")
    if (n < 2).any():
        raise CannotTest("every group needs at least two units")
    H, E, means = scatter_matrices(X, codes, G)
    e_eig = np.linalg.eigvalsh(E)
    if e_eig.min() <= 1e-10 * max(e_eig.max(), 1e-300):
        raise SingularWithinScatter(
            "within-group scatter is singular; drop a covariate that is constant "
            "within groups or collinear with others")
    ld_t = np.linalg.slogdet(H + E)[1]
    det_e, det_t = np.linalg.det(E), np.linalg.det(H + E)
    if X.shape[1] == 1:
        wilks = float(E[0, 0] / (H[0, 0] + E[0, 0]))
    elif np.isfinite(det_e) and np.isfinite(det_t) and det_t > 0:
        wilks = float(det_e / det_t)
    else:
        wilks = float(np.exp(np.linalg.slogdet(E)[1] - ld_t))
    theta = linalg.eigh(H, E, eigvals_only=True)
    theta = np.clip(theta, 0.0, None)
    wilks_eig = float(np.prod(1.0 / (1.0 + theta)))

    p = None
    used_draws = None
    if method == "bartlett":
        N, m = X.shape
        chi = -(N - 1 - (m + G) / 2) * math.log(wilks)
        p = float(stats.chi2.sf(chi, m * (G - 1)))
    elif method == "exact":
        assign = enumerate_assignments(n, budget).astype(np.int64)
        Xo = X[np.argsort(codes, kind="stable")]
        vals = np.concatenate([_wilks_batch(Xo, assign[i:i + CHUNK], n, ld_t)
                               for i in range(0, len(assign), CHUNK)])
        p = float(np.mean(vals <= wilks * (1 + 1e-10)))
        used_draws = len(vals)
    elif method == "permutation":
        if seed is None:
            raise InvalidArgument("a seed is required for the permutation p-value")
        if draws < 1:
            raise InvalidArgument("draws must be at least 1")
        rng = np.random.default_rng(seed)
        count = 0
        for start in range(0, draws, CHUNK):
            mm = min(CHUNK, draws - start)
            assign = rng.permuted(np.tile(codes, (mm, 1)), axis=1)
            vals = _wilks_batch(X, assign, n, ld_t)
            count += int(np.sum(vals <= wilks * (1 + 1e-10)))
        p = (1 + count) / (draws + 1)
        used_draws = draws
    elif method is not None:
        raise InvalidArgument(f"unknown method {method!r}")
    return BalanceReport(H, E, theta, wilks, wilks_eig, p, method, used_draws,
                         seed if method == "permutation" else None, keys, n, means,
                         list(covariates) if covariates is not None else [f"x{j + 1}" for j in range(X.shape[1])])


def dataset_balance(dataset, design: Design, covariates, baselines=None, **kwargs) -> BalanceReport:
    """Wilks test with design runs as groups and covariates expanded to
    numeric columns (indicators minus baseline for categorical ones)."""
    X, names = dataset.covariate_matrix(covariates, baselines)
    pos = dataset.run_positions(design)
    labels = [tuple(int(v) for v in design.runs[j]) for j in pos]
    return manova_wilks(X, labels, covariates=names, **kwargs)


# ---------------------------------------------------------------------------
# standardized differences
# ---------------------------------------------------------------------------

def _run_mask(dataset, run):
    run = np.asarray(run, dtype=np.int8)
    return np.all(dataset.runs == run[None, :], axis=1)


def standardized_differences(dataset, covariate: str, group_a, group_b):
    """``(mean_a - mean_b) / sqrt((s_a^2 + s_b^2) / 2)``.

    Groups are runs (tuples of +-1) or boolean masks. Categorical covariates
    give a dict of per-level values using binomial variances of the level
    shares. Zero pooled variance raises :class:`UndefinedDifference`.
    """
    a = _run_mask(dataset, group_a) if not _is_mask(group_a, dataset) else np.asarray(group_a)
    b = _run_mask(dataset, group_b) if not _is_mask(group_b, dataset) else np.asarray(group_b)
    if not a.any() or not b.any():
        raise CannotTest("both groups must be non-empty")
    values = dataset.covariates[covariate]
    if dataset.covariate_kinds[covariate] == "numeric":
        xa = values[a].astype(float)
        xb = values[b].astype(float)
        xa, xb = xa[~np.isnan(xa)], xb[~np.isnan(xb)]
        va = xa.var(ddof=1) if len(xa) > 1 else 0.0
        vb = xb.var(ddof=1) if len(xb) > 1 else 0.0
        pooled = (va + vb) / 2
        if pooled <= 0:
            raise UndefinedDifference(f"{covariate}: pooled variance is zero")
        return float((xa.mean() - xb.mean()) / math.sqrt(pooled))
    va = [v for v in values[a] if v is not None]
    vb = [v for v in values[b] if v is not None]
    out = {}
    for lev in dataset.levels(covariate):
        pa = sum(v == lev for v in va) / len(va)
        pb = sum(v == lev for v in vb) / len(vb)
        pooled = (pa * (1 - pa) + pb * (1 - pb)) / 2
        if pooled <= 0:
            raise UndefinedDifference(f"{covariate}={lev}: pooled variance is zero")
        out[lev] = (pa - pb) / math.sqrt(pooled)
    return out


def _is_mask(g, dataset) -> bool:
    arr = np.asarray(g)
    return arr.dtype == bool and arr.shape == (dataset.n,)


# ---------------------------------------------------------------------------
# sequential trimming
# ---------------------------------------------------------------------------

@dataclass
class TrimStep:
    step: int
    unit_id: str
    p_before: float
    p_after: float
    wilks_after: float


@dataclass
class TrimResult:
    dataset: object
    steps: list
    final: BalanceReport
    threshold: float
    balanced: bool

    @property
    def not_balanced(self) -> bool:
        return not self.balanced

    @property
    def removed(self) -> list:
        return [s.unit_id for s in self.steps]

    def audit_rows(self):
        yield ["step", "unit_id", "p_before", "p_after", "wilks_after"]
        for s in self.steps:
            yield [str(s.step), s.unit_id, repr(s.p_before), repr(s.p_after), repr(s.wilks_after)]


def id_key(uid: str):
    """Numeric identifiers sort numerically, others lexically after them."""
    return (0, int(uid), "") if uid.lstrip("-").isdigit() else (1, 0, uid)


def candidate_scan(dataset, design: Design, covariates, min_group_size: int, baselines=None, **wilks_kwargs):
    """Balance after removing each eligible unit alone.

    Returns ``[(unit_id, report), ...]`` for units whose group is larger
    than ``min_group_size``.
    """
    pos = dataset.run_positions(design)
    sizes = np.bincount(pos, minlength=design.n_runs)
    out = []
    for i, uid in enumerate(dataset.ids):
        if sizes[pos[i]] <= min_group_size:
            continue
        keep = np.ones(dataset.n, dtype=bool)
        keep[i] = False
        try:
            rep = dataset_balance(dataset.subset(keep), design, covariates, baselines, **wilks_kwargs)
        except SingularWithinScatter:
            continue
        out.append((uid, rep))
    return out


def best_candidate(scan):
    """Highest p-value; ties go to the larger Wilks, then the smallest id."""
    return min(scan, key=lambda c: (-c[1].p_value, -c[1].wilks, id_key(c[0])))


def sequential_trim(dataset, design: Design, covariates, threshold: float = 0.1, min_group_size: int = 2,
                    draws: int = 2000, seed: int | None = None, method: str = "permutation",
                    baselines=None, max_steps: int | None = None) -> TrimResult:
    """Greedily drop single units until the balance p-value reaches
    ``threshold``.

    Each step removes the unit whose removal gives the largest p-value
    (same seed for every candidate, so the comparison uses common random
    draws). Stops early, flagged as not balanced, when every group is at
    ``min_group_size``.
    """
    if not 0 < threshold < 1:
        raise InvalidArgument("threshold must lie in (0, 1)")
    if min_group_size < 2:
        raise InvalidArgument("min_group_size must be at least 2")
    kw = dict(draws=draws, seed=seed, method=method)
    current = dataset
    report = dataset_balance(current, design, covariates, baselines, **kw)
    if report.p_value is None:
        raise InvalidArgument("trimming needs a p-value method")
    steps = []
    while report.p_value < threshold and (max_steps is None or len(steps) < max_steps):
        scan = candidate_scan(current, design, covariates, min_group_size, baselines, **kw)
        if not scan:
            break
        uid, new = best_candidate(scan)
        steps.append(TrimStep(len(steps) + 1, uid, report.p_value, new.p_value, new.wilks))
        current = current.drop_ids([uid])
        report = new
    return TrimResult(current, steps, report, threshold, report.p_value >= threshold)


# ---------------------------------------------------------------------------
# two-group contrasts
# ---------------------------------------------------------------------------

@dataclass
class GlobalTest:
    run_a: tuple
    run_b: tuple
    estimate: float
    variance: float
    ci: tuple
    decomposition: dict
    n_a: int
    n_b: int

    @property
    def z(self) -> float:
        return self.estimate / math.sqrt(self.variance) if self.variance > 0 else math.inf

    @property
    def p_value(self) -> float:
        return float(2 * stats.norm.sf(abs(self.z)))


def two_group_global_test(dataset, run_a, run_b, alpha: float = 0.05) -> GlobalTest:
    """Difference in outcome means between two runs, its two-sample Neyman
    variance and the effects that difference estimates."""
    run_a = tuple(int(v) for v in run_a)
    run_b = tuple(int(v) for v in run_b)
    ya = dataset.outcome[_run_mask(dataset, run_a)]
    yb = dataset.outcome[_run_mask(dataset, run_b)]
    for run, y in ((run_a, ya), (run_b, yb)):
        if len(y) < 2:
            raise CannotTest(f"run {run_label(run)} has {len(y)} unit(s); two are needed")
    est = float(ya.mean() - yb.mean())
    var = float(ya.var(ddof=1) / len(ya) + yb.var(ddof=1) / len(yb))
    k = len(run_a)
    w = [0] * (2**k)
    w[run_index(run_a)] += 1
    w[run_index(run_b)] -= 1
    dec = partial_alias_decomposition(w, k)
    return GlobalTest(run_a, run_b, est, var, confidence_interval(est, var, alpha), dec, len(ya), len(yb))


def write_rows(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)

