"""Datasets: loading, dichotomizing factors, counting runs and choosing a
fraction that fits the observed support."""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .design import (
    Design,
    DesignSpec,
    alias_table,
    enumerate_fractions,
    fraction_runs,
    full_factorial_runs,
    resolution,
    run_index,
    run_label,
)
from .errors import ForeignRun, InvalidArgument, LoadError

MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none", "."})


def _is_missing(value: str | None) -> bool:
    return value is None or value.strip().lower() in MISSING_TOKENS


@dataclass
class Dataset:
    """Units with an assigned run, an observed outcome and covariates.

    ``runs`` is an ``(n, k)`` int8 array of +-1 levels. Numeric covariates are
    float arrays (NaN for missing); categorical ones are object arrays of
    strings (``None`` for missing).
    """

    ids: list
    runs: np.ndarray
    outcome: np.ndarray
    factor_names: tuple = ()
    covariates: dict = field(default_factory=dict)
    covariate_kinds: dict = field(default_factory=dict)
    outcome_name: str = "outcome"
    log_transformed: bool = False

    def __post_init__(self):
        self.runs = np.asarray(self.runs, dtype=np.int8)
        self.outcome = np.asarray(self.outcome, dtype=float)
        self.ids = [str(i) for i in self.ids]
        if self.runs.ndim != 2:
            raise InvalidArgument("runs must be a 2-d array (n_units, k)")
        n = self.runs.shape[0]
        if self.outcome.shape != (n,) or len(self.ids) != n:
            raise InvalidArgument("ids, runs and outcome must have the same length")
        if n and not np.all(np.abs(self.runs) == 1):
            raise InvalidArgument("run levels must be +-1")
        if len(set(self.ids)) != n:
            raise InvalidArgument("unit identifiers must be unique")
        if not self.factor_names:
            self.factor_names = tuple(f"F{i + 1}" for i in range(self.runs.shape[1]))
        for name, values in self.covariates.items():
            if len(values) != n:
                raise InvalidArgument(f"covariate {name!r} has the wrong length")
            self.covariate_kinds.setdefault(
                name, "numeric" if np.asarray(values).dtype.kind in "fiub" else "categorical"
            )

    @classmethod
    def from_arrays(cls, runs, outcome, ids=None, covariates=None, **kwargs) -> "Dataset":
        runs = np.asarray(runs)
        if ids is None:
            ids = [str(i + 1) for i in range(runs.shape[0])]
        covs = {}
        for name, values in (covariates or {}).items():
            arr = np.asarray(values)
            covs[name] = arr.astype(float) if arr.dtype.kind in "fiub" else arr.astype(object)
        return cls(list(ids), runs, outcome, covariates=covs, **kwargs)

    @property
    def n(self) -> int:
        return self.runs.shape[0]

    @property
    def k(self) -> int:
        return self.runs.shape[1]

    def __len__(self) -> int:
        return self.n

    def subset(self, selector) -> "Dataset":
        """Units picked by a boolean mask or an index array, order kept."""
        sel = np.asarray(selector)
        if sel.dtype == bool:
            idx = np.flatnonzero(sel)
        else:
            idx = np.asarray(sel, dtype=np.int64)
        return Dataset(
            ids=[self.ids[i] for i in idx],
            runs=self.runs[idx],
            outcome=self.outcome[idx],
            factor_names=self.factor_names,
            covariates={k: v[idx] for k, v in self.covariates.items()},
            covariate_kinds=dict(self.covariate_kinds),
            outcome_name=self.outcome_name,
            log_transformed=self.log_transformed,
        )

    def drop_ids(self, ids) -> "Dataset":
        gone = set(ids)
        return self.subset(np.array([i not in gone for i in self.ids], dtype=bool))

    def run_positions(self, design: Design) -> np.ndarray:
        """Index of each unit's run within ``design``; foreign runs raise."""
        out = np.empty(self.n, dtype=np.int64)
        for i, run in enumerate(self.runs):
            try:
                out[i] = design.index_of(run)
            except KeyError:
                raise ForeignRun(
                    f"unit {self.ids[i]} is in run {run_label(run)}, which is not in {design!r}"
                ) from None
        return out

    def restrict_to(self, design: Design) -> "Dataset":
        """Keep only units whose run belongs to ``design``."""
        keep = np.array([design.contains(r) for r in self.runs], dtype=bool)
        return self.subset(keep)

    def complete_cases(self, names) -> "Dataset":
        keep = np.ones(self.n, dtype=bool)
        for name in names:
            values = self.covariates[name]
            if self.covariate_kinds[name] == "numeric":
                keep &= ~np.isnan(values.astype(float))
            else:
                keep &= np.array([v is not None for v in values], dtype=bool)
        return self.subset(keep)

    def levels(self, name: str) -> list:
        values = self.covariates[name]
        return sorted({v for v in values if v is not None})

    def covariate_matrix(self, names, baselines=None):
        """Numeric design block for ``names``.

        Categorical covariates become indicator columns, one per level except
        the baseline (first level in sorted order unless given in
        ``baselines``). Returns ``(matrix, column_names)``. Missing values
        must already be removed.
        """
        baselines = baselines or {}
        cols, col_names = [], []
        for name in names:
            values = self.covariates[name]
            if self.covariate_kinds[name] == "numeric":
                arr = values.astype(float)
                if np.isnan(arr).any():
                    raise InvalidArgument(f"covariate {name!r} has missing values")
                cols.append(arr)
                col_names.append(name)
                continue
            if any(v is None for v in values):
                raise InvalidArgument(f"covariate {name!r} has missing values")
            levels = self.levels(name)
            base = baselines.get(name, levels[0] if levels else None)
            if levels and base not in levels:
                raise InvalidArgument(f"baseline {base!r} is not a level of {name!r}")
            for lev in levels:
                if lev == base:
                    continue
                cols.append(np.array([v == lev for v in values], dtype=float))
                col_names.append(f"{name}:{lev}")
        if not cols:
            return np.zeros((self.n, 0)), []
        return np.column_stack(cols), col_names


# ---------------------------------------------------------------------------
# schema + loading
# ---------------------------------------------------------------------------

@dataclass
class Schema:
    """How to read a delimited file into a :class:`Dataset`.

    ``factors`` maps column name to a detection limit (``value >= limit`` is
    +1) or ``None`` when the column is already coded +-1.
    """

    outcome: str
    factors: dict
    transform: str | None = None
    id_column: str | None = None
    covariates: dict = field(default_factory=dict)
    level_maps: dict = field(default_factory=dict)
    baselines: dict = field(default_factory=dict)
    filters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.transform not in (None, "", "none", "log"):
            raise InvalidArgument(f"unknown outcome transform {self.transform!r}")
        if self.transform in ("", "none"):
            self.transform = None
        for name, kind in self.covariates.items():
            if kind not in ("numeric", "categorical"):
                raise InvalidArgument(f"covariate {name!r}: unknown type {kind!r}")
        if not self.factors:
            raise InvalidArgument("schema names no factor columns")


def _config_parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str
    return cp


def parse_schema(text: str) -> Schema:
    """Read the INI-style schema.

    Sections: ``[outcome]`` (``column``, ``transform``), ``[id]``
    (``column``), ``[factors]`` (``name = limit`` or ``name = coded``),
    ``[covariates]`` (``name = numeric|categorical``), ``[levels:<name>]``
    (``raw = mapped``), ``[baselines]`` and ``[filter]``
    (``column = allowed, values``).
    """
    cp = _config_parser()
    cp.read_string(text)
    if not cp.has_section("outcome") or "column" not in cp["outcome"]:
        raise InvalidArgument("schema needs [outcome] column = ...")
    factors = {}
    for name, raw in cp["factors"].items() if cp.has_section("factors") else []:
        raw = raw.strip()
        if raw.lower() in ("coded", "pm1", "+-1", "±1"):
            factors[name] = None
        else:
            try:
                factors[name] = float(raw)
            except ValueError:
                raise InvalidArgument(f"factor {name!r}: bad detection limit {raw!r}") from None
    level_maps = {
        sec.split(":", 1)[1].strip(): dict(cp[sec].items())
        for sec in cp.sections()
        if sec.startswith("levels:")
    }
    filters = {}
    if cp.has_section("filter"):
        for col, raw in cp["filter"].items():
            filters[col] = {v.strip() for v in raw.split(",")}
    return Schema(
        outcome=cp["outcome"]["column"].strip(),
        transform=cp["outcome"].get("transform", None),
        factors=factors,
        id_column=cp["id"]["column"].strip() if cp.has_section("id") else None,
        covariates=dict(cp["covariates"].items()) if cp.has_section("covariates") else {},
        level_maps=level_maps,
        baselines=dict(cp["baselines"].items()) if cp.has_section("baselines") else {},
        filters=filters,
    )


def load_schema(path) -> Schema:
    return parse_schema(Path(path).read_text(encoding="utf-8"))


@dataclass
class IngestionReport:
    units_read: int = 0
    units_loaded: int = 0
    dropped_missing_outcome: int = 0
    dropped_missing_factor: int = 0
    dropped_by_filter: int = 0

    FIELDS = (
        "units_read",
        "units_loaded",
        "dropped_missing_outcome",
        "dropped_missing_factor",
        "dropped_by_filter",
    )

    def to_text(self) -> str:
        return "".join(f"{name}: {getattr(self, name)}\n" for name in self.FIELDS)


def _sniff_delimiter(header: str) -> str:
    return "\t" if header.count("\t") > header.count(",") else ","


def _parse_float(value: str, what: str, row: int) -> float:
    try:
        x = float(value)
    except ValueError:
        raise LoadError(f"{what}: cannot parse {value!r} as a number", row) from None
    if math.isnan(x):
        raise LoadError(f"{what}: NaN value", row)
    return x


def _dichotomize(value: str, limit, name: str, row: int) -> int:
    x = _parse_float(value, f"factor {name!r}", row)
    if limit is None:
        if x not in (-1.0, 1.0):
            raise LoadError(f"factor {name!r}: coded value must be -1 or +1, got {value!r}", row)
        return int(x)
    return 1 if x >= limit else -1


def load_dataset(path, schema: Schema):
    """Read a comma- or tab-delimited file into a :class:`Dataset`.

    Complete-case policy: rows failing a filter, then rows missing the
    outcome, then rows missing any factor are dropped, each counted once
    under the first reason that applies. Missing covariates are kept as
    missing. Returns ``(dataset, report)``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise LoadError("file is empty or has no header", 1)
        delim = _sniff_delimiter(header_line)
        fh.seek(0)
        reader = csv.reader(fh, delimiter=delim)
        header = [h.strip() for h in next(reader)]
        col = {name: i for i, name in enumerate(header)}
        needed = [schema.outcome, *schema.factors, *schema.covariates, *schema.filters]
        if schema.id_column:
            needed.append(schema.id_column)
        for name in needed:
            if name not in col:
                raise LoadError(f"unknown column {name!r}", 1)

        report = IngestionReport()
        ids, runs, outcome = [], [], []
        covs = {name: [] for name in schema.covariates}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise LoadError(f"expected {len(header)} fields, got {len(row)}", lineno)
            report.units_read += 1
            get = lambda name: row[col[name]].strip()  # noqa: E731

            if any(get(c) not in allowed for c, allowed in schema.filters.items()):
                report.dropped_by_filter += 1
                continue
            raw_y = get(schema.outcome)
            if _is_missing(raw_y):
                report.dropped_missing_outcome += 1
                continue
            if any(_is_missing(get(f)) for f in schema.factors):
                report.dropped_missing_factor += 1
                continue

            y = _parse_float(raw_y, f"outcome {schema.outcome!r}", lineno)
            if schema.transform == "log":
                if y <= 0:
                    raise LoadError(f"outcome {y!r} is not positive; cannot log-transform", lineno)
                y = math.log(y)
            run = [_dichotomize(get(f), lim, f, lineno) for f, lim in schema.factors.items()]

            for name, kind in schema.covariates.items():
                raw = get(name)
                mapping = schema.level_maps.get(name, {})
                if raw in mapping:
                    raw = mapping[raw].strip()
                if _is_missing(raw):
                    covs[name].append(math.nan if kind == "numeric" else None)
                elif kind == "numeric":
                    covs[name].append(_parse_float(raw, f"covariate {name!r}", lineno))
                else:
                    covs[name].append(raw)

            ids.append(get(schema.id_column) if schema.id_column else str(report.units_read))
            runs.append(run)
            outcome.append(y)

    if len(set(ids)) != len(ids):
        raise LoadError("unit identifiers are not unique")
    report.units_loaded = len(ids)
    k = len(schema.factors)
    dataset = Dataset(
        ids=ids,
        runs=np.array(runs, dtype=np.int8).reshape(len(ids), k),
        outcome=np.array(outcome, dtype=float),
        factor_names=tuple(schema.factors),
        covariates={
            name: np.array(vals, dtype=float if schema.covariates[name] == "numeric" else object)
            for name, vals in covs.items()
        },
        covariate_kinds=dict(schema.covariates),
        outcome_name=schema.outcome,
        log_transformed=schema.transform == "log",
    )
    return dataset, report


# ---------------------------------------------------------------------------
# counts + fraction selection
# ---------------------------------------------------------------------------

@dataclass
class CountsTable:
    runs: np.ndarray
    counts: np.ndarray

    @property
    def k(self) -> int:
        return self.runs.shape[1]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def zero_runs(self) -> list:
        return [tuple(int(v) for v in self.runs[j]) for j in np.flatnonzero(self.counts == 0)]

    @property
    def singleton_runs(self) -> list:
        return [tuple(int(v) for v in self.runs[j]) for j in np.flatnonzero(self.counts == 1)]

    def count(self, run) -> int:
        return int(self.counts[run_index(run)])

    def to_rows(self, factor_names=None):
        names = list(factor_names or [f"F{i + 1}" for i in range(self.k)])
        yield ["run", *names, "count", "flag"]
        for j, (run, c) in enumerate(zip(self.runs, self.counts)):
            flag = "empty" if c == 0 else ("single" if c == 1 else "")
            yield [str(j + 1), *(f"{int(v):+d}" for v in run), str(int(c)), flag]


def counts_table(dataset: Dataset, k: int | None = None) -> CountsTable:
    k = dataset.k if k is None else k
    if dataset.n and dataset.k != k:
        raise InvalidArgument(f"dataset has {dataset.k} factors, expected {k}")
    idx = np.array([run_index(r) for r in dataset.runs], dtype=np.int64)
    counts = np.bincount(idx, minlength=2**k) if len(idx) else np.zeros(2**k, dtype=np.int64)
    return CountsTable(full_factorial_runs(k), counts.astype(np.int64))


@dataclass
class FractionCandidate:
    spec: DesignSpec
    resolution: int
    runs: np.ndarray = field(repr=False)
    units: int = 0
    smallest_count: int = 0


@dataclass
class FeasibleFractions:
    """Feasible regular fractions, best resolution first.

    ``candidates`` is sorted by resolution (descending), then by retained
    units (descending), then by spec text, purely for stable output; ``top``
    holds every candidate sharing the best resolution, and the caller decides
    among them when there is more than one.
    """

    candidates: list
    blocking_runs: list
    min_count: int

    @property
    def top(self) -> list:
        if not self.candidates:
            return []
        best = self.candidates[0].resolution
        return [c for c in self.candidates if c.resolution == best]

    @property
    def is_tied(self) -> bool:
        return len(self.top) > 1

    def diagnostic(self) -> str:
        if self.candidates:
            return f"{len(self.candidates)} feasible fraction(s)"
        runs = ", ".join(run_label(r) for r in self.blocking_runs)
        return f"no feasible fraction; runs below min count {self.min_count}: {runs}"


def feasible_fractions(counts: CountsTable, p: int, min_count: int = 2) -> FeasibleFractions:
    """All regular 2^(k-p) fractions whose runs each hold at least
    ``min_count`` units."""
    if p < 1:
        raise InvalidArgument("fraction exponent p must be >= 1")
    if min_count < 1:
        raise InvalidArgument("min_count must be >= 1")
    blocking = [tuple(int(v) for v in counts.runs[j]) for j in np.flatnonzero(counts.counts < min_count)]
    out = []
    for spec in enumerate_fractions(counts.k, p):
        runs = fraction_runs(spec)
        c = np.array([counts.counts[run_index(r)] for r in runs])
        if c.min() < min_count:
            continue
        out.append(
            FractionCandidate(
                spec=spec,
                resolution=resolution(alias_table(spec)),
                runs=runs,
                units=int(c.sum()),
                smallest_count=int(c.min()),
            )
        )
    out.sort(key=lambda c: (-c.resolution, -c.units, str(c.spec)))
    return FeasibleFractions(out, blocking, min_count)
