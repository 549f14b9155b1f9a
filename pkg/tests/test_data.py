import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from fracfactorial.data import (
    Dataset,
    Schema,
    counts_table,
    feasible_fractions,
    load_dataset,
    parse_schema,
)
from fracfactorial.design import Design, fraction_runs, parse_design, resolution, alias_table
from fracfactorial.errors import ForeignRun, InvalidArgument, LoadError

import synth


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


SIMPLE_SCHEMA = """\
[outcome]
column = y

[factors]
a = 0.5
b = coded
"""


class TestLoad:
    def test_missing_outcome_dropped(self, tmp_path):
        data = write(tmp_path, "d.csv", "y,a,b\n1.0,0.2,1\n,0.7,-1\n2.0,0.7,1\n3.0,0.1,-1\n")
        ds, rep = load_dataset(data, parse_schema(SIMPLE_SCHEMA))
        assert ds.n == 3
        assert rep.units_loaded == 3 and rep.dropped_missing_outcome == 1
        assert rep.dropped_missing_factor == 0 and rep.dropped_by_filter == 0

    def test_threshold_semantics(self, tmp_path):
        data = write(tmp_path, "d.csv", "y,a,b\n1,0.2,1\n1,0.7,1\n1,0.5,1\n")
        ds, _ = load_dataset(data, parse_schema(SIMPLE_SCHEMA))
        assert ds.runs[:, 0].tolist() == [-1, 1, 1]  # value at the limit counts as +1

    def test_log_transform(self, tmp_path):
        data = write(tmp_path, "d.csv", f"y,a,b\n1,0.2,1\n{math.e!r},0.7,1\n")
        schema = parse_schema(SIMPLE_SCHEMA.replace("column = y", "column = y\ntransform = log"))
        ds, _ = load_dataset(data, schema)
        assert_allclose(ds.outcome, [0.0, 1.0])
        assert ds.log_transformed

    def test_tab_delimited(self, tmp_path):
        data = write(tmp_path, "d.tsv", "y\ta\tb\n1\t0.2\t1\n2\t0.9\t-1\n")
        ds, _ = load_dataset(data, parse_schema(SIMPLE_SCHEMA))
        assert ds.runs.tolist() == [[-1, 1], [1, -1]]

    def test_unknown_column(self, tmp_path):
        data = write(tmp_path, "d.csv", "y,a\n1,0.2\n")
        with pytest.raises(LoadError, match="unknown column 'b'"):
            load_dataset(data, parse_schema(SIMPLE_SCHEMA))

    def test_non_numeric_outcome_reports_row(self, tmp_path):
        data = write(tmp_path, "d.csv", "y,a,b\n1,0.2,1\nabc,0.2,1\n")
        with pytest.raises(LoadError) as exc:
            load_dataset(data, parse_schema(SIMPLE_SCHEMA))
        assert exc.value.row == 3

    def test_bad_factor_value(self, tmp_path):
        data = write(tmp_path, "d.csv", "y,a,b\n1,0.2,2\n")
        with pytest.raises(LoadError, match="row 2"):
            load_dataset(data, parse_schema(SIMPLE_SCHEMA))

    def test_study_file(self, tmp_path):
        rng = np.random.default_rng(0)
        counts = synth.scaled_study_counts(divisor=20)
        synth.write_study(tmp_path / "study.csv", counts, rng)
        ds, rep = load_dataset(tmp_path / "study.csv", parse_schema(synth.STUDY_SCHEMA))
        total = sum(c for _, c in counts)
        assert rep.units_read == total + 4
        assert (rep.dropped_missing_outcome, rep.dropped_missing_factor, rep.dropped_by_filter) == (2, 1, 1)
        assert rep.units_loaded == ds.n == total
        assert "Don't know" not in set(ds.covariates["smoker"])
        ct = counts_table(ds)
        for run, c in counts:
            assert ct.count(run) == c
        text = rep.to_text()
        for name in ("units_loaded", "dropped_missing_outcome", "dropped_missing_factor", "dropped_by_filter"):
            assert f"{name}:" in text


class TestSchema:
    def test_sections(self):
        s = parse_schema(synth.STUDY_SCHEMA)
        assert s.outcome == "bmi" and s.transform == "log" and s.id_column == "seqn"
        assert s.factors == {"bhex": 0.5, "hepox": 0.5, "mirex": 0.5, "ddt": 0.5}
        assert s.level_maps == {"smoker": {"Don't know": "Yes"}}
        assert s.filters == {"farmer": {"no"}}

    def test_bad_covariate_kind(self):
        with pytest.raises(InvalidArgument):
            Schema("y", {"a": None}, covariates={"x": "ordinal"})


class TestDataset:
    def test_unique_ids(self):
        with pytest.raises(InvalidArgument):
            Dataset(["1", "1"], [[1], [-1]], [0.0, 1.0])

    def test_covariate_matrix_baseline(self):
        ds = Dataset.from_arrays([[1], [-1], [1]], [0, 0, 0],
                                 covariates={"eth": np.array(["b", "a", "c"], dtype=object), "age": [1, 2, 3]})
        X, names = ds.covariate_matrix(["age", "eth"])
        assert names == ["age", "eth:b", "eth:c"]
        assert_array_equal(X, [[1, 1, 0], [2, 0, 0], [3, 0, 1]])
        X, names = ds.covariate_matrix(["eth"], baselines={"eth": "c"})
        assert names == ["eth:a", "eth:b"]

    def test_foreign_run(self):
        d = Design.parse("2^(3-1): 3=12")
        ds = Dataset.from_arrays([[-1, -1, -1]], [1.0])
        with pytest.raises(ForeignRun):
            ds.run_positions(d)
        assert ds.restrict_to(d).n == 0

    @given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=20), st.floats(0, 10))
    def test_dichotomization_monotone(self, values, bump):
        from fracfactorial.data import _dichotomize

        for v in values:
            assert _dichotomize(repr(v + bump), 5.0, "x", 1) >= _dichotomize(repr(v), 5.0, "x", 1)


class TestCounts:
    def test_empty_dataset(self):
        ds = Dataset.from_arrays(np.zeros((0, 3), dtype=int), [])
        ct = counts_table(ds, 3)
        assert ct.counts.tolist() == [0] * 8 and ct.total == 0

    def test_single_run(self):
        ds = Dataset.from_arrays([[1, -1]] * 5, np.arange(5.0))
        ct = counts_table(ds)
        assert ct.counts.tolist() == [0, 0, 5, 0]
        assert len(ct.zero_runs) == 3

    def test_study_count_pattern(self):
        rng = np.random.default_rng(1)
        ds = synth.unit_dataset(synth.STUDY_COUNTS, lambda r, g: 0.0, rng)
        ct = counts_table(ds)
        assert ct.total == 1259
        assert ct.singleton_runs == [synth.STUDY_SINGLE_RUN]
        assert ct.zero_runs == []


def _counts_with(k, counts_by_run):
    ds = synth.unit_dataset(list(counts_by_run.items()), lambda r, g: 0.0, np.random.default_rng(0))
    return counts_table(ds, k)


class TestFeasibleFractions:
    def test_empty_run_excludes_half(self):
        # z7 (1-based, standard order) = (+1, +1, -1) is empty
        counts = {r: 3 for r in synth.lattice(3) if r != (1, 1, -1)}
        ff = feasible_fractions(_counts_with(3, counts), 1)
        words = {str(c.spec.defining_words()[0]) for c in ff.candidates}
        assert "123" in words and "-123" not in words
        minus = [c for c in enumerate_specs(3, 1) if str(c.defining_words()[0]) == "-123"][0]
        assert (1, 1, -1) in {tuple(r) for r in fraction_runs(minus).tolist()}

    def test_study_count_selection(self):
        ff = feasible_fractions(_counts_with(4, dict(synth.STUDY_COUNTS)), 1, min_count=2)
        words = [str(c.spec.defining_words()[0]) for c in ff.candidates]
        assert "-1234" in words and "1234" not in words
        assert [str(c.spec) for c in ff.top] == ["2^(4-1): 4=-123"]
        assert not ff.is_tied
        # at min_count 1 the single-unit run no longer blocks
        ff1 = feasible_fractions(_counts_with(4, dict(synth.STUDY_COUNTS)), 1, min_count=1)
        assert ff1.is_tied

    def test_unconstrained(self):
        counts = {r: 5 for r in synth.lattice(4)}
        ff = feasible_fractions(_counts_with(4, counts), 1)
        assert len(ff.candidates) == len(list(enumerate_specs(4, 1)))
        assert ff.candidates[0].resolution == 4

    def test_none_feasible(self):
        counts = {r: 5 for r in synth.lattice(2) if r[0] == 1}
        ff = feasible_fractions(_counts_with(2, counts), 1)
        assert ff.candidates == []
        assert "(-1,-1)" not in ff.diagnostic() and "[-1,-1]" in ff.diagnostic()

    def test_claims_hold(self):
        rng = np.random.default_rng(5)
        counts = {r: int(rng.integers(0, 3)) for r in synth.lattice(4)}
        ct = _counts_with(4, counts)
        for c in feasible_fractions(ct, 1).candidates + feasible_fractions(ct, 2).candidates:
            runs = {tuple(r) for r in fraction_runs(c.spec).tolist()}
            assert all(counts[r] >= 2 for r in runs)
            assert resolution(alias_table(c.spec)) == c.resolution


def enumerate_specs(k, p):
    from fracfactorial.design import enumerate_fractions

    return list(enumerate_fractions(k, p))


def test_parse_design_roundtrip_for_candidates():
    counts = {r: 5 for r in synth.lattice(3)}
    for c in feasible_fractions(_counts_with(3, counts), 1).candidates:
        assert parse_design(str(c.spec)) == c.spec
