"""Fisher randomization tests of the sharp null of no unit-level effects.

Under the sharp null every potential outcome equals the observed one, so the
reference distribution comes from re-assigning units to runs with the
observed group sizes held fixed, either exhaustively or by seeded sampling.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .design import Design, EffectWord
from .errors import BudgetExceeded, CannotTest, InvalidArgument
from .estimation import ENUMERATION_BUDGET, assignment_count, enumerate_assignments

CHUNK = 4096


@dataclass
class RandomizationTest:
    words: list
    observed: float
    null: np.ndarray
    p_value: float
    draws: int
    seed: int | None
    mode: str
    alternative: str = "two-sided"

    @property
    def statistic(self) -> str:
        if len(self.words) == 1:
            return f"tau_hat({self.words[0]})"
        return "max |tau_hat| over " + ",".join(str(w) for w in self.words)

    def write_null(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["statistic"])
            w.writerows([repr(float(v))] for v in self.null)

    def summary_rows(self):
        yield ["statistic", "observed", "p_value", "draws", "seed", "mode", "alternative"]
        yield [self.statistic, repr(float(self.observed)), repr(float(self.p_value)), str(self.draws),
               "NA" if self.seed is None else str(self.seed), self.mode, self.alternative]


def _group_weights(design: Design, words, n) -> np.ndarray:
    """``U[j, w] = c_w g_wj / n_j`` so that ``tau_hat = S @ U`` for group
    sums ``S``."""
    U = np.empty((design.n_runs, len(words)))
    for i, w in enumerate(words):
        U[:, i] = float(design.effect_scale(w)) * design.contrast(w) / n
    return U


def _statistics(assign: np.ndarray, y: np.ndarray, U: np.ndarray) -> np.ndarray:
    A, n = assign.shape
    J = U.shape[0]
    flat = (np.arange(A, dtype=np.int64)[:, None] * J + assign).ravel()
    S = np.bincount(flat, weights=np.tile(y, A), minlength=A * J).reshape(A, J)
    return S @ U


def _reduce(T: np.ndarray, alternative: str) -> np.ndarray:
    if alternative == "two-sided":
        return np.abs(T).max(axis=1)
    if T.shape[1] != 1:
        raise InvalidArgument("one-sided tests need a single word")
    return T[:, 0] if alternative == "greater" else -T[:, 0]


def joint_fisher_test(dataset, design: Design, words, draws: int = 999, seed: int | None = None,
                      mode: str = "monte-carlo", alternative: str = "two-sided",
                      budget: int = ENUMERATION_BUDGET) -> RandomizationTest:
    """Randomization test of ``max_w |tau_hat(w)|`` over ``words``.

    ``mode`` is ``"exact"`` (every assignment once, plain tail proportion)
    or ``"monte-carlo"`` (``draws`` seeded re-assignments, add-one p-value
    ``(1 + #extreme) / (draws + 1)``).
    """
    if isinstance(words, EffectWord):
        words = [words]
    words = list(words)
    if not words:
        raise InvalidArgument("no words to test")
    if alternative not in ("two-sided", "greater", "less"):
        raise InvalidArgument(f"unknown alternative {alternative!r}")
    pos = dataset.run_positions(design)
    n = np.bincount(pos, minlength=design.n_runs)
    if (n == 0).any():
        raise CannotTest("every design run needs at least one unit")
    # units sorted by observed group: row 0 of the exact enumeration is then
    # the observed assignment
    order = np.argsort(pos, kind="stable")
    y = dataset.outcome[order]
    observed_assign = pos[order]
    U = _group_weights(design, words, n)
    obs = float(_reduce(_statistics(observed_assign[None, :], y, U), alternative)[0])

    if mode == "exact":
        if assignment_count(n) > budget:
            raise BudgetExceeded(f"{assignment_count(n)} assignments exceed the budget of {budget}")
        assign = enumerate_assignments(n, budget).astype(np.int64)
        null = np.concatenate([_reduce(_statistics(assign[i:i + CHUNK], y, U), alternative)
                               for i in range(0, len(assign), CHUNK)])
        tol = 1e-10 * max(1.0, float(np.abs(null).max()))
        p = float(np.mean(null >= obs - tol))
        return RandomizationTest(words, obs, null, p, len(null), None, "exact", alternative)

    if mode != "monte-carlo":
        raise InvalidArgument(f"unknown mode {mode!r}")
    if draws < 1:
        raise InvalidArgument("draws must be at least 1")
    if seed is None:
        raise InvalidArgument("a seed is required for Monte Carlo tests")
    rng = np.random.default_rng(seed)
    parts = []
    for start in range(0, draws, CHUNK):
        m = min(CHUNK, draws - start)
        assign = rng.permuted(np.tile(observed_assign, (m, 1)), axis=1)
        parts.append(_reduce(_statistics(assign, y, U), alternative))
    null = np.concatenate(parts)
    tol = 1e-10 * max(1.0, abs(obs), float(np.abs(null).max()))
    p = (1 + int(np.sum(null >= obs - tol))) / (draws + 1)
    return RandomizationTest(words, obs, null, p, draws, seed, "monte-carlo", alternative)


def fisher_test(dataset, design: Design, word: EffectWord, draws: int = 999, seed: int | None = None,
                mode: str = "monte-carlo", alternative: str = "two-sided",
                budget: int = ENUMERATION_BUDGET) -> RandomizationTest:
    """Randomization test for a single effect; two-sided via ``|tau_hat|``
    unless ``alternative`` is ``"greater"`` or ``"less"``."""
    return joint_fisher_test(dataset, design, [word], draws, seed, mode, alternative, budget)
