"""Two-level factorial design algebra.

Effect words, run enumeration, contrast vectors, the model matrix G,
defining-contrast subgroups, alias tables and the exact partial-aliasing
decomposition used to identify what an arbitrary run contrast estimates.

Factors are numbered from 1. A word is stored as a sorted tuple of factor
indices plus a sign; internally the factor set is also available as a bitmask
with factor ``f`` on bit ``f - 1``.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    DesignParseError,
    InconsistentDesign,
    InvalidArgument,
    InvalidGenerator,
)

MAX_FACTORS = 20
MAX_DENSE_FACTORS = 12

# factor 1..9 -> '1'..'9', factor 10..20 -> 'a'..'k'
FACTOR_SYMBOLS = "123456789abcdefghijk"


def factor_symbol(f: int) -> str:
    if not 1 <= f <= MAX_FACTORS:
        raise InvalidArgument(f"factor index {f} outside 1..{MAX_FACTORS}")
    return FACTOR_SYMBOLS[f - 1]


def _factor_from_symbol(ch: str) -> int:
    idx = FACTOR_SYMBOLS.find(ch.lower())
    if idx < 0:
        raise InvalidArgument(f"unknown factor symbol {ch!r}")
    return idx + 1


def _popcount(x: np.ndarray) -> np.ndarray:
    return np.bitwise_count(x).astype(np.int64)


@dataclass(frozen=True)
class EffectWord:
    """A signed product of factors: the mean (empty word), a main effect or
    an interaction.

    Multiplication is the symmetric difference of factor sets with signs
    multiplied, so every word is its own inverse and ``I`` is the identity.
    """

    factors: tuple = ()
    sign: int = 1

    def __post_init__(self):
        facs = tuple(sorted(int(f) for f in self.factors))
        if len(set(facs)) != len(facs):
            raise InvalidArgument(f"repeated factor in word {facs}")
        for f in facs:
            if not 1 <= f <= MAX_FACTORS:
                raise InvalidArgument(f"factor index {f} outside 1..{MAX_FACTORS}")
        if self.sign not in (1, -1):
            raise InvalidArgument(f"sign must be +1 or -1, got {self.sign}")
        object.__setattr__(self, "factors", facs)
        object.__setattr__(self, "sign", int(self.sign))

    @classmethod
    def from_mask(cls, mask: int, sign: int = 1) -> "EffectWord":
        facs = [i + 1 for i in range(mask.bit_length()) if mask >> i & 1]
        return cls(tuple(facs), sign)

    @classmethod
    def parse(cls, text: str) -> "EffectWord":
        """Parse ``"I"``, ``"-I"``, ``"12"``, ``"-1234"``, ``"+1a"`` or
        ``"1.2.3"`` / ``"1*2"`` / ``"1·2"`` forms."""
        s = text.strip().replace(" ", "")
        sign = 1
        if s[:1] in "+-":
            sign = -1 if s[0] == "-" else 1
            s = s[1:]
        if s in ("I", "i", "0", ""):
            if s == "":
                raise InvalidArgument(f"empty effect word {text!r}")
            return cls((), sign)
        s = re.sub(r"[.*·]", "", s)
        return cls(tuple(_factor_from_symbol(ch) for ch in s), sign)

    @property
    def mask(self) -> int:
        m = 0
        for f in self.factors:
            m |= 1 << (f - 1)
        return m

    @property
    def order(self) -> int:
        return len(self.factors)

    @property
    def is_mean(self) -> bool:
        return not self.factors

    def positive(self) -> "EffectWord":
        return self if self.sign == 1 else EffectWord(self.factors, 1)

    def sort_key(self):
        return (len(self.factors), self.factors)

    def __mul__(self, other: "EffectWord") -> "EffectWord":
        if not isinstance(other, EffectWord):
            return NotImplemented
        return EffectWord.from_mask(self.mask ^ other.mask, self.sign * other.sign)

    def __neg__(self) -> "EffectWord":
        return EffectWord(self.factors, -self.sign)

    def label(self) -> str:
        """Unsigned label: ``I`` for the mean, digits/letters otherwise."""
        if not self.factors:
            return "I"
        return "".join(factor_symbol(f) for f in self.factors)

    def __str__(self) -> str:
        return ("-" if self.sign < 0 else "") + self.label()

    def __repr__(self) -> str:
        return f"EffectWord({str(self)!r})"


I = EffectWord(())


def canonical_words(k: int) -> list:
    """All 2^k positive words: mean, mains ascending, then by length and
    lexicographically within each length."""
    if not 1 <= k <= MAX_FACTORS:
        raise InvalidArgument(f"k={k} outside 1..{MAX_FACTORS}")
    words = [I]
    for r in range(1, k + 1):
        words.extend(EffectWord(c) for c in itertools.combinations(range(1, k + 1), r))
    return words


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

def full_factorial_runs(k: int) -> np.ndarray:
    """All 2^k runs as a ``(2^k, k)`` int8 array, last factor fastest, first
    run all -1."""
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= MAX_FACTORS:
        raise InvalidArgument(f"factor count must be in 1..{MAX_FACTORS}, got {k!r}")
    k = int(k)
    idx = np.arange(2**k, dtype=np.int64)[:, None]
    shifts = np.arange(k - 1, -1, -1, dtype=np.int64)[None, :]
    bits = (idx >> shifts) & 1
    return (2 * bits - 1).astype(np.int8)


def run_index(run: Sequence[int]) -> int:
    """Position of ``run`` in the full-factorial canonical order (0-based)."""
    idx = 0
    for level in run:
        if level not in (-1, 1):
            raise InvalidArgument(f"run levels must be +-1, got {tuple(run)}")
        idx = (idx << 1) | (1 if level == 1 else 0)
    return idx


def run_label(run: Sequence[int]) -> str:
    return "[" + ",".join("+1" if v > 0 else "-1" for v in run) + "]"


def _minus_masks(runs: np.ndarray) -> np.ndarray:
    """Bitmask of the factors at level -1, one integer per run."""
    runs = np.asarray(runs)
    k = runs.shape[1]
    weights = (np.int64(1) << np.arange(k, dtype=np.int64))
    return ((runs < 0).astype(np.int64) * weights).sum(axis=1)


def contrast_vector(word: EffectWord, runs: np.ndarray) -> np.ndarray:
    """Entries ``sign * prod(run[f] for f in word)`` over ``runs``."""
    runs = np.asarray(runs)
    if runs.ndim != 2:
        raise InvalidArgument("runs must be a 2-d array (n_runs, k)")
    if word.factors and word.factors[-1] > runs.shape[1]:
        raise InvalidArgument(f"word {word} uses factors beyond k={runs.shape[1]}")
    parity = _popcount(_minus_masks(runs) & word.mask) & 1
    return (word.sign * (1 - 2 * parity)).astype(np.int8)


@dataclass(frozen=True)
class ModelMatrix:
    """Dense G: rows are canonical words, columns are canonical runs."""

    values: np.ndarray
    words: tuple
    runs: np.ndarray = field(repr=False)

    def row(self, word: EffectWord) -> np.ndarray:
        return self.values[self.words.index(word.positive())] * word.sign

    def column(self, j: int) -> np.ndarray:
        """``h_j`` for the 0-based run index ``j``."""
        return self.values[:, j]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def model_matrix(k: int) -> ModelMatrix:
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= MAX_DENSE_FACTORS:
        raise InvalidArgument(f"dense model matrix needs 1 <= k <= {MAX_DENSE_FACTORS}, got {k!r}")
    runs = full_factorial_runs(int(k))
    words = canonical_words(int(k))
    masks = np.array([w.mask for w in words], dtype=np.int64)
    parity = _popcount(masks[:, None] & _minus_masks(runs)[None, :]) & 1
    G = (1 - 2 * parity).astype(np.int8)
    return ModelMatrix(G, tuple(words), runs)


# ---------------------------------------------------------------------------
# fractional designs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Generator:
    """``factor = word`` where ``word`` is a signed product of base factors."""

    factor: int
    word: EffectWord

    def defining_word(self) -> EffectWord:
        return EffectWord.from_mask(self.word.mask | 1 << (self.factor - 1), self.word.sign)

    def __str__(self) -> str:
        return f"{factor_symbol(self.factor)}={self.word}"


@dataclass(frozen=True)
class DesignSpec:
    k: int
    p: int = 0
    generators: tuple = ()

    def __post_init__(self):
        k, p = self.k, self.p
        if not isinstance(k, (int, np.integer)) or not 1 <= k <= MAX_FACTORS:
            raise InvalidArgument(f"factor count must be in 1..{MAX_FACTORS}, got {k!r}")
        if not isinstance(p, (int, np.integer)) or not 0 <= p < k:
            raise InvalidArgument(f"fraction exponent must satisfy 0 <= p < k, got p={p!r}")
        gens = tuple(self.generators)
        object.__setattr__(self, "generators", gens)
        if len(gens) != p:
            raise InvalidGenerator(f"2^({k}-{p}) needs exactly {p} generators, got {len(gens)}")
        generated = [g.factor for g in gens]
        if len(set(generated)) != len(generated):
            raise InvalidGenerator(f"a factor is generated twice: {generated}")
        for g in gens:
            if not 1 <= g.factor <= k:
                raise InvalidGenerator(f"generated factor {g.factor} outside 1..{k}")
            if g.word.is_mean:
                raise InvalidGenerator(f"generator for factor {g.factor} has an empty word")
            for f in g.word.factors:
                if f > k:
                    raise InvalidGenerator(f"generator {g} uses factor {f} > k={k}")
                if f in generated:
                    raise InvalidGenerator(f"generator {g} references generated factor {f}")

    @property
    def generated_factors(self) -> tuple:
        return tuple(g.factor for g in self.generators)

    @property
    def base_factors(self) -> tuple:
        gen = set(self.generated_factors)
        return tuple(f for f in range(1, self.k + 1) if f not in gen)

    @property
    def n_runs(self) -> int:
        return 2 ** (self.k - self.p)

    def defining_words(self) -> list:
        return [g.defining_word() for g in self.generators]

    def __str__(self) -> str:
        head = f"2^({self.k}-{self.p})"
        if not self.generators:
            return head
        return head + ": " + ", ".join(str(g) for g in self.generators)


_SPEC_HEAD = re.compile(r"\s*2\s*\^\s*(?:\(\s*(\d+)\s*(?:-\s*(\d+)\s*)?\)|(\d+))\s*")
_GEN = re.compile(r"\s*([1-9a-kA-K])\s*=\s*([+-]?)\s*([1-9a-kA-K.*·]+)\s*")


def parse_design(text: str) -> DesignSpec:
    """Parse ``2^(4-1): 4=-123``, ``2^(5-2): 4=12, 5=13``, ``2^(2-0)`` or ``2^3``."""
    m = _SPEC_HEAD.match(text)
    if not m:
        raise DesignParseError("expected '2^(k-p)'", text, 0)
    if m.group(3) is not None:
        k, p = int(m.group(3)), 0
    else:
        k, p = int(m.group(1)), int(m.group(2) or 0)
    pos = m.end()
    gens = []
    if pos < len(text):
        if text[pos] != ":":
            raise DesignParseError("expected ':' before generators", text, pos)
        pos += 1
        while pos < len(text):
            gm = _GEN.match(text, pos)
            if not gm:
                raise DesignParseError("malformed generator", text, pos)
            try:
                factor = _factor_from_symbol(gm.group(1))
                word = EffectWord.parse(gm.group(2) + gm.group(3))
            except InvalidArgument as exc:
                raise DesignParseError(str(exc), text, pos) from None
            gens.append(Generator(factor, word))
            pos = gm.end()
            if pos < len(text):
                if text[pos] not in ",;":
                    raise DesignParseError("expected ',' between generators", text, pos)
                pos += 1
    return DesignSpec(k, p, tuple(gens))


def fraction_runs(spec: DesignSpec) -> np.ndarray:
    """Runs of a regular 2^(k-p) fraction, base factors in full-factorial
    order and generated columns filled in from their generators."""
    if spec.p == 0:
        return full_factorial_runs(spec.k)
    base = spec.base_factors
    base_runs = full_factorial_runs(len(base))
    runs = np.zeros((base_runs.shape[0], spec.k), dtype=np.int8)
    for col, f in enumerate(base):
        runs[:, f - 1] = base_runs[:, col]
    for g in spec.generators:
        runs[:, g.factor - 1] = contrast_vector(g.word, runs)
    return runs


def subgroup_from_words(words: Iterable[EffectWord]) -> tuple:
    """Close ``words`` under the signed product; raise if -I appears."""
    group = {0: 1}  # mask -> sign
    for w in words:
        if w.mask in group:
            if group[w.mask] != w.sign:
                raise InconsistentDesign(f"defining words imply -I (conflict on {w.positive()})")
            continue
        for mask, sign in list(group.items()):
            new_mask, new_sign = mask ^ w.mask, sign * w.sign
            if new_mask in group and group[new_mask] != new_sign:
                raise InconsistentDesign("defining words imply -I")
            group[new_mask] = new_sign
    out = [EffectWord.from_mask(m, s) for m, s in group.items()]
    return tuple(sorted(out, key=EffectWord.sort_key))


def defining_subgroup(spec: DesignSpec) -> tuple:
    return subgroup_from_words(spec.defining_words())


@dataclass(frozen=True)
class AliasTable:
    k: int
    subgroup: tuple

    @property
    def p(self) -> int:
        return len(self.subgroup).bit_length() - 1

    def alias_set(self, word: EffectWord) -> tuple:
        return alias_set(word, self)

    def representative(self, word: EffectWord) -> EffectWord:
        """Canonically-first member of the class, signed relative to ``word``.

        ``word`` is then ``sign * representative`` in the fraction.
        """
        members = alias_set(word.positive(), self)
        rep = min(members, key=EffectWord.sort_key)
        return rep

    def classes(self) -> list:
        """Each class as a tuple: positive representative first, then the
        other members signed relative to it, canonical order."""
        seen = set()
        out = []
        for w in canonical_words(self.k):
            if w.mask in seen:
                continue
            members = alias_set(w, self)
            for m in members:
                seen.add(m.mask)
            out.append(members)
        return out

    def estimable_words(self) -> list:
        return [cls[0] for cls in self.classes()]


def alias_table(spec: DesignSpec) -> AliasTable:
    return AliasTable(spec.k, defining_subgroup(spec))


def alias_set(word: EffectWord, table: AliasTable) -> tuple:
    """``{word * d : d in subgroup}``, ``word`` itself first, the rest in
    canonical order."""
    members = [word * d for d in table.subgroup]
    head, rest = members[0], members[1:]
    return (head,) + tuple(sorted(rest, key=EffectWord.sort_key))


def resolution(table: AliasTable):
    """Length of the shortest non-identity defining word; ``None`` for a
    full factorial."""
    lengths = [w.order for w in table.subgroup if not w.is_mean]
    return min(lengths) if lengths else None


def alias_relations(table: AliasTable) -> list:
    """Alias classes in display order, each as ``"word = +-word = ..."``.

    The identity class comes first, then main-effect classes from the last
    factor down, then the remaining classes in canonical order. Singleton
    classes (full factorial) are omitted.
    """
    classes = [c for c in table.classes() if len(c) > 1]

    def key(cls):
        rep = cls[0]
        if rep.is_mean:
            return (0, 0, ())
        if rep.order == 1:
            return (1, -rep.factors[0], ())
        return (2, rep.order, rep.factors)

    lines = []
    for cls in sorted(classes, key=key):
        rep, rest = cls[0], sorted(cls[1:], key=EffectWord.sort_key)
        lines.append(" = ".join([str(rep)] + [str(m) for m in rest]))
    return lines


# ---------------------------------------------------------------------------
# enumeration of all regular fractions
# ---------------------------------------------------------------------------

def enumerate_fractions(k: int, p: int) -> Iterator[DesignSpec]:
    """Every regular 2^(k-p) fraction exactly once, with both signs of each
    defining word.

    Subspaces of the word group are walked through their reduced echelon
    bases with each basis word pivoting on its highest factor; the pivots
    become the generated factors. Degenerate fractions in which a factor is
    held constant are skipped.
    """
    if not 1 <= k <= MAX_DENSE_FACTORS or not 1 <= p < k:
        raise InvalidArgument(f"need 1 <= p < k <= {MAX_DENSE_FACTORS}, got k={k}, p={p}")
    for pivots in itertools.combinations(range(1, k + 1), p):
        pivot_set = set(pivots)
        choices = []
        for q in pivots:
            free = [f for f in range(1, q) if f not in pivot_set]
            subsets = [
                c for r in range(1, len(free) + 1) for c in itertools.combinations(free, r)
            ]
            choices.append(subsets)
        for words in itertools.product(*choices):
            for signs in itertools.product((1, -1), repeat=p):
                gens = tuple(
                    Generator(q, EffectWord(w, s)) for q, w, s in zip(pivots, words, signs)
                )
                yield DesignSpec(k, p, gens)


def max_resolution_fractions(k: int, p: int) -> list:
    """All fractions attaining the maximum resolution; no tie-break."""
    best, out = -1, []
    for spec in enumerate_fractions(k, p):
        r = resolution(alias_table(spec))
        if r > best:
            best, out = r, [spec]
        elif r == best:
            out.append(spec)
    return out


# ---------------------------------------------------------------------------
# designs as run sets
# ---------------------------------------------------------------------------

class Design:
    """A set of runs over k factors: a full factorial, a regular fraction, or
    an arbitrary (incomplete) subset of the full lattice."""

    def __init__(self, k: int, runs: np.ndarray, spec: DesignSpec | None = None):
        runs = np.asarray(runs, dtype=np.int8)
        if runs.ndim != 2 or runs.shape[1] != k:
            raise InvalidArgument(f"runs must have shape (n_runs, {k})")
        if not np.all(np.abs(runs) == 1):
            raise InvalidArgument("run levels must be +-1")
        self.k = int(k)
        self.runs = runs
        self.runs.setflags(write=False)
        self.spec = spec
        self._index = {tuple(int(v) for v in r): j for j, r in enumerate(runs)}
        if len(self._index) != len(runs):
            raise InvalidArgument("duplicate runs in design")
        self._table = alias_table(spec) if spec is not None else None

    @classmethod
    def full(cls, k: int) -> "Design":
        return cls(k, full_factorial_runs(k), DesignSpec(k, 0, ()))

    @classmethod
    def from_spec(cls, spec: DesignSpec) -> "Design":
        return cls(spec.k, fraction_runs(spec), spec)

    @classmethod
    def parse(cls, text: str) -> "Design":
        return cls.from_spec(parse_design(text))

    @classmethod
    def from_runs(cls, k: int, runs) -> "Design":
        return cls(k, np.asarray(runs), None)

    @property
    def n_runs(self) -> int:
        return self.runs.shape[0]

    @property
    def p(self):
        return self.spec.p if self.spec is not None else None

    @property
    def is_regular(self) -> bool:
        return self.spec is not None

    @property
    def alias_table(self) -> AliasTable | None:
        return self._table

    def effect_scale(self, word: EffectWord) -> Fraction:
        """Coefficient c in ``c * g^T Ybar``: 2^-(m-1), or 2^-m for the mean,
        where the design has 2^m runs."""
        j = self.n_runs
        return Fraction(1, j) if word.is_mean else Fraction(2, j)

    def contrast(self, word: EffectWord) -> np.ndarray:
        return contrast_vector(word, self.runs)

    def index_of(self, run) -> int:
        key = tuple(int(v) for v in run)
        try:
            return self._index[key]
        except KeyError:
            raise KeyError(run_label(key)) from None

    def contains(self, run) -> bool:
        return tuple(int(v) for v in run) in self._index

    def estimable_words(self) -> list:
        """One representative per alias class (all words for a full design)."""
        if self._table is None:
            raise InvalidArgument("estimable words are defined only for regular designs")
        return self._table.estimable_words()

    def alias_class(self, word: EffectWord) -> tuple:
        if self._table is None:
            return (word,)
        return alias_set(word, self._table)

    def lattice_indices(self) -> np.ndarray:
        """Positions of this design's runs in the full 2^k canonical order."""
        return np.array([run_index(r) for r in self.runs], dtype=np.int64)

    def __repr__(self) -> str:
        what = str(self.spec) if self.spec is not None else f"incomplete, {self.n_runs} runs"
        return f"Design(k={self.k}, {what})"


# ---------------------------------------------------------------------------
# partial aliasing
# ---------------------------------------------------------------------------

def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    return Fraction(float(x))


def partial_alias_decomposition(weights: Sequence, k: int) -> dict:
    """Express ``sum_j w_j * Ybar(z_j)`` over the 2^k lattice as a
    combination of factorial effects, exactly.

    Uses ``Ybar(z_j) = tau(0) + 1/2 * sum_{w != I} h_j[w] tau(w)``, so the
    coefficient on ``tau(w)`` is ``1/2 * sum_j w_j h_j[w]`` and the
    coefficient on the mean ``tau(0)`` is ``sum_j w_j``. Weights are
    converted to :class:`~fractions.Fraction` (floats exactly, so pass
    Fractions when the weights are not dyadic). Returns only nonzero
    coefficients, keyed by positive words in canonical order.
    """
    if not 1 <= k <= MAX_DENSE_FACTORS:
        raise InvalidArgument(f"decomposition needs 1 <= k <= {MAX_DENSE_FACTORS}")
    if len(weights) != 2**k:
        raise InvalidArgument(f"need {2**k} weights, got {len(weights)}")
    fr = [_as_fraction(w) for w in weights]
    nz = [j for j, w in enumerate(fr) if w != 0]
    if not nz:
        return {}
    words = canonical_words(k)
    runs = full_factorial_runs(k)[nz]
    masks = np.array([w.mask for w in words], dtype=np.int64)
    signs = 1 - 2 * (_popcount(masks[:, None] & _minus_masks(runs)[None, :]) & 1)
    out = {}
    for wi, word in enumerate(words):
        total = sum((fr[j] if s > 0 else -fr[j]) for j, s in zip(nz, signs[wi]))
        coef = total if word.is_mean else total / 2
        if coef != 0:
            out[word] = coef
    return out


def format_estimand(decomposition: dict) -> str:
    """Render a decomposition like ``tau(1) - 1/3 tau(13) + 1/3 tau(23)``."""
    if not decomposition:
        return "0"
    parts = []
    for word, c in decomposition.items():
        name = "tau(0)" if word.is_mean else f"tau({word.label()})"
        mag = abs(c)
        body = name if mag == 1 else f"{mag} {name}"
        if not parts:
            parts.append(("-" if c < 0 else "") + body)
        else:
            parts.append(("- " if c < 0 else "+ ") + body)
    return " ".join(parts)
