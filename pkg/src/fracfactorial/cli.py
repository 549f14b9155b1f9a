"""Command-line interface.

Subcommands: design, counts, balance, trim, estimate, fisher, pipeline.
Tables are written as comma-delimited UTF-8 text.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from . import __version__
from .balance import dataset_balance, sequential_trim
from .data import counts_table, feasible_fractions, load_dataset, load_schema
from .design import (
    Design,
    EffectWord,
    alias_relations,
    contrast_vector,
    full_factorial_runs,
    parse_design,
    resolution,
    run_index,
)
from .errors import FactorialError, InvalidArgument, StageError
from .estimation import (
    effect_report_rows,
    estimate_effects,
    incomplete_estimate,
    summarize_groups,
)
from .randomization import fisher_test
from .regression import fit_estimates, ols_fit, saturated_matrix

METHODS = ("neyman", "regression", "incomplete")


def _rows_to_text(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _emit(rows, out=None) -> None:
    text = _rows_to_text(rows)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _fmt(x) -> str:
    return "NA" if x is None else repr(float(x))


# ---------------------------------------------------------------------------
# design text
# ---------------------------------------------------------------------------

def design_text(design: Design) -> str:
    lines = [f"design: {design.spec}" if design.spec is not None else f"design: {design!r}"]
    lines.append(f"runs: {design.n_runs}")
    header = ["run"] + [f"F{i + 1}" for i in range(design.k)]
    lines.append(" ".join(f"{h:>4}" for h in header))
    for j, r in enumerate(design.runs):
        lines.append(" ".join(f"{v:>4}" for v in [str(j + 1)] + [f"{int(x):+d}" for x in r]))
    if design.is_regular:
        rel = alias_relations(design.alias_table)
        res = resolution(design.alias_table)
        lines.append("aliasing:" if rel else "aliasing: none (full factorial)")
        lines.extend(f"  {r}" for r in rel)
        lines.append(f"resolution: {'full' if res is None else res}")
    return "\n".join(lines) + "\n"


def cmd_design(args) -> int:
    spec = parse_design(args.spec)
    sys.stdout.write(design_text(Design.from_spec(spec)))
    return 0


# ---------------------------------------------------------------------------
# helpers shared by the data subcommands
# ---------------------------------------------------------------------------

def _load(args):
    schema = load_schema(args.schema)
    dataset, report = load_dataset(args.data, schema)
    return schema, dataset, report


def _resolve_design(text: str, dataset, p: int | None = None, min_count: int = 2) -> Design:
    text = text.strip()
    if text == "full":
        return Design.full(dataset.k)
    if text == "auto":
        if not p:
            raise InvalidArgument("design 'auto' needs a fraction exponent p >= 1")
        ff = feasible_fractions(counts_table(dataset), p, min_count)
        if not ff.candidates:
            raise InvalidArgument(ff.diagnostic())
        if ff.is_tied:
            names = "; ".join(str(c.spec) for c in ff.top)
            raise InvalidArgument(f"several fractions share the best resolution, pick one: {names}")
        return Design.from_spec(ff.top[0].spec)
    spec = parse_design(text)
    if spec.k != dataset.k:
        raise InvalidArgument(f"design has {spec.k} factors but the data have {dataset.k}")
    return Design.from_spec(spec)


def _parse_words(text, design: Design):
    if not text:
        return [w for w in design.estimable_words() if not w.is_mean]
    return [EffectWord.parse(t.strip()) for t in text.split(",") if t.strip()]


def paired_weights(word: EffectWord, occupied, k: int) -> list:
    """Contrast of ``word`` restricted to occupied runs whose partner (the
    run with the word's first factor flipped) is also occupied, so the
    weights sum to zero."""
    runs = full_factorial_runs(k)
    g = contrast_vector(word, runs)
    f = word.factors[0] - 1
    occ = set(int(j) for j in occupied)
    out = []
    for j, r in enumerate(runs):
        mate = r.copy()
        mate[f] = -mate[f]
        out.append(int(g[j]) if j in occ and run_index(mate) in occ else 0)
    return out


def incomplete_estimates(dataset, words, alpha: float, min_count: int = 1) -> list:
    full = Design.full(dataset.k)
    summary = summarize_groups(dataset, full)
    occupied = np.flatnonzero(summary.n >= min_count)
    out = []
    for w in words:
        est = incomplete_estimate(summary, paired_weights(w, occupied, dataset.k), w, alpha=alpha)
        out.append(est)
    return out


def _covariates(arg, schema):
    if arg is None:
        return list(schema.covariates)
    return [c.strip() for c in arg.split(",") if c.strip()]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_counts(args) -> int:
    _, dataset, report = _load(args)
    counts = counts_table(dataset)
    _emit(counts.to_rows(dataset.factor_names), args.out)
    sys.stderr.write(report.to_text())
    if args.p:
        ff = feasible_fractions(counts, args.p, args.min_count)
        sys.stderr.write(ff.diagnostic() + "\n")
        for c in ff.candidates:
            sys.stderr.write(f"  resolution {c.resolution}: {c.spec} (units {c.units}, smallest run {c.smallest_count})\n")
        if ff.is_tied:
            sys.stderr.write("  note: several fractions share the best resolution\n")
    return 0


def _require_seed(args, what: str):
    if args.seed is None:
        raise InvalidArgument(f"--seed is required for {what}")


def cmd_balance(args) -> int:
    schema, dataset, _ = _load(args)
    if args.method == "permutation":
        _require_seed(args, "permutation balance tests")
    design = _resolve_design(args.design, dataset, args.p, args.min_count)
    covs = _covariates(args.covariates, schema)
    data = dataset.restrict_to(design).complete_cases(covs)
    rep = dataset_balance(data, design, covs, schema.baselines, draws=args.draws, seed=args.seed,
                          method=args.method)
    _emit(list(rep.rows()) + [[]] + list(rep.means_rows()), args.out)
    return 0


def cmd_trim(args) -> int:
    schema, dataset, _ = _load(args)
    _require_seed(args, "trimming (permutation balance tests)")
    design = _resolve_design(args.design, dataset, args.p, args.min_count)
    covs = _covariates(args.covariates, schema)
    data = dataset.restrict_to(design).complete_cases(covs)
    res = sequential_trim(data, design, covs, args.threshold, args.min_group_size, args.draws, args.seed,
                          baselines=schema.baselines)
    _emit(res.audit_rows(), args.out)
    sys.stderr.write(f"removed {len(res.steps)} unit(s); final p = {res.final.p_value}; "
                     f"{'balanced' if res.balanced else 'not balanced'}\n")
    return 0


def _estimates_for(method, data, design, words, alpha, covariates=(), baselines=None):
    if method == "neyman":
        return estimate_effects(summarize_groups(data, design), words, alpha)
    if method == "regression":
        dm = saturated_matrix(data, design, covariates=covariates, baselines=baselines)
        fit = ols_fit(dm, data.outcome)
        return fit_estimates(fit, alpha, words)
    if method == "incomplete":
        return incomplete_estimates(data, words, alpha)
    raise InvalidArgument(f"unknown method {method!r}")


def cmd_estimate(args) -> int:
    schema, dataset, _ = _load(args)
    design = _resolve_design(args.design, dataset, args.p, args.min_count)
    words = _parse_words(args.words, design)
    data = dataset if args.method == "incomplete" else dataset.restrict_to(design)
    ests = _estimates_for(args.method, data, design, words, args.alpha)
    _emit(effect_report_rows(ests), args.out)
    return 0


def cmd_fisher(args) -> int:
    _, dataset, _ = _load(args)
    if args.mode == "monte-carlo":
        _require_seed(args, "Monte Carlo randomization tests")
    design = _resolve_design(args.design, dataset, args.p, args.min_count)
    data = dataset.restrict_to(design)
    rows = [["word", "observed", "p_value", "draws", "seed", "mode"]]
    for w in _parse_words(args.words, design):
        t = fisher_test(data, design, w, args.draws, args.seed, args.mode)
        rows.append([str(w), _fmt(t.observed), _fmt(t.p_value), str(t.draws),
                     "NA" if t.seed is None else str(t.seed), t.mode])
        if args.null_dir:
            Path(args.null_dir).mkdir(parents=True, exist_ok=True)
            t.write_null(Path(args.null_dir) / f"null_{w.label()}.csv")
    _emit(rows, args.out)
    return 0


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass
class AnalysisConfig:
    data: Path
    schema: Path
    output: Path
    design: str = "auto"
    p: int = 1
    min_count: int = 2
    methods: tuple = ("neyman",)
    alpha: float = 0.05
    fisher_draws: int = 0
    seed: int | None = None
    covariates: tuple = ()
    balance_draws: int = 1000
    trim: bool = False
    trim_threshold: float = 0.1
    min_group_size: int = 2
    adjust: tuple = ()
    words: tuple = field(default_factory=tuple)

    def validate(self):
        for path in (self.data, self.schema):
            if not Path(path).exists():
                raise InvalidArgument(f"missing input file {path}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise InvalidArgument(f"unknown method(s): {', '.join(bad)}")
        needs_seed = self.fisher_draws > 0 or self.trim or bool(self.covariates)
        if needs_seed and self.seed is None:
            raise InvalidArgument("seed is required when Fisher tests, balance or trimming are enabled")
        if not 0 < self.alpha < 1:
            raise InvalidArgument("alpha must lie in (0, 1)")

    @classmethod
    def from_file(cls, path) -> "AnalysisConfig":
        path = Path(path)
        cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        cp.optionxform = str
        cp.read_string(path.read_text(encoding="utf-8"))
        if not cp.has_section("pipeline"):
            raise InvalidArgument("config needs a [pipeline] section")
        sec = cp["pipeline"]
        base = path.parent

        def rel(key):
            if key not in sec:
                raise InvalidArgument(f"config is missing {key!r}")
            p = Path(sec[key].strip())
            return p if p.is_absolute() else base / p

        def items(key):
            return tuple(s.strip() for s in sec.get(key, "").split(",") if s.strip())

        seed = sec.get("seed", "").strip()
        return cls(
            data=rel("data"),
            schema=rel("schema"),
            output=rel("output"),
            design=sec.get("design", "auto"),
            p=sec.getint("p", 1),
            min_count=sec.getint("min_count", 2),
            methods=items("methods") or ("neyman",),
            alpha=sec.getfloat("alpha", 0.05),
            fisher_draws=sec.getint("fisher_draws", 0),
            seed=int(seed) if seed else None,
            covariates=items("covariates"),
            balance_draws=sec.getint("balance_draws", 1000),
            trim=sec.getboolean("trim", False),
            trim_threshold=sec.getfloat("trim_threshold", 0.1),
            min_group_size=sec.getint("min_group_size", 2),
            adjust=items("adjust"),
            words=items("words"),
        )


class _Bundle:
    """Files staged in a scratch directory and published on success."""

    def __init__(self, output: Path):
        self.output = Path(output)
        self.output.parent.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=".partial-", dir=self.output.parent))
        self.files = []

    def write(self, name: str, text: str):
        (self.stage / name).write_text(text, encoding="utf-8")
        self.files.append(name)

    def rows(self, name: str, rows):
        self.write(name, _rows_to_text(rows))

    def publish(self):
        manifest = ["file,sha256,bytes"]
        for name in sorted(self.files):
            data = (self.stage / name).read_bytes()
            manifest.append(f"{name},{hashlib.sha256(data).hexdigest()},{len(data)}")
        (self.stage / "manifest.csv").write_text("\n".join(manifest) + "\n", encoding="utf-8")
        self.output.mkdir(parents=True, exist_ok=True)
        old = self.output / "manifest.csv"
        if old.exists():
            # files from an earlier bundle; nothing outside the manifest is touched
            for row in list(csv.reader(old.read_text(encoding="utf-8").splitlines()))[1:]:
                if row and "/" not in row[0] and row[0] != "manifest.csv":
                    (self.output / row[0]).unlink(missing_ok=True)
        for name in self.files + ["manifest.csv"]:
            shutil.move(str(self.stage / name), str(self.output / name))
        shutil.rmtree(self.stage, ignore_errors=True)

    def discard(self):
        shutil.rmtree(self.stage, ignore_errors=True)


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except StageError:
        raise
    except (FactorialError, ValueError, OSError, KeyError) as exc:
        raise StageError(name, exc) from exc


def run_pipeline(cfg: AnalysisConfig) -> Path:
    """Run every configured stage and publish the report bundle to
    ``cfg.output``. On failure nothing is published and :class:`StageError`
    names the stage."""
    _stage("config", cfg.validate)
    bundle = _Bundle(cfg.output)
    try:
        _run_stages(cfg, bundle)
    except Exception:
        bundle.discard()
        raise
    bundle.publish()
    return cfg.output


def _run_stages(cfg: AnalysisConfig, bundle: _Bundle) -> None:
    schema = _stage("load", load_schema, cfg.schema)
    dataset, report = _stage("load", load_dataset, cfg.data, schema)
    bundle.write("ingestion.txt", report.to_text())
    audit = [["stage", "units"], ["loaded", str(dataset.n)]]

    counts = _stage("counts", counts_table, dataset)
    bundle.rows("counts.csv", counts.to_rows(dataset.factor_names))

    design = _stage("design", _resolve_design, cfg.design, dataset, cfg.p, cfg.min_count)
    bundle.write("design.txt", design_text(design))
    data = dataset.restrict_to(design)
    audit.append(["in_design", str(data.n)])
    words = [EffectWord.parse(w) for w in cfg.words] or [w for w in design.estimable_words() if not w.is_mean]

    covs = list(cfg.covariates)
    if covs:
        data = _stage("balance", data.complete_cases, covs)
        audit.append(["complete_covariates", str(data.n)])
        before = _stage("balance", dataset_balance, data, design, covs, schema.baselines,
                        draws=cfg.balance_draws, seed=cfg.seed)
        bundle.rows("balance_before.csv", list(before.rows()) + [[]] + list(before.means_rows()))
        if cfg.trim:
            res = _stage("trim", sequential_trim, data, design, covs, cfg.trim_threshold, cfg.min_group_size,
                         cfg.balance_draws, cfg.seed, baselines=schema.baselines)
            data = res.dataset
            bundle.rows("trim_audit.csv", res.audit_rows())
            bundle.rows("balance_after.csv", list(res.final.rows()) + [[]] + list(res.final.means_rows()))
            bundle.rows("counts_after_trim.csv", counts_table(data).to_rows(dataset.factor_names))
            bundle.write("trim_status.txt", f"removed: {len(res.steps)}\nbalanced: {str(res.balanced).lower()}\n"
                                            f"final_p: {res.final.p_value!r}\nthreshold: {cfg.trim_threshold!r}\n")
            audit.append(["after_trim", str(data.n)])
    audit.append(["analyzed", str(data.n)])

    results = {}
    for method in cfg.methods:
        ests = _stage(f"estimate:{method}", _estimates_for, method,
                      dataset if method == "incomplete" else data, design, words, cfg.alpha)
        results[method] = {e.word: e for e in ests}
        bundle.rows(f"effects_{method}.csv", effect_report_rows(ests))
    if cfg.adjust:
        ests = _stage("estimate:regression_adjusted", _estimates_for, "regression", data, design, words,
                      cfg.alpha, cfg.adjust, schema.baselines)
        for e in ests:
            e.method = "regression_adjusted"
        results["regression_adjusted"] = {e.word: e for e in ests}
        bundle.rows("effects_regression_adjusted.csv", effect_report_rows(ests))

    fisher = {}
    if cfg.fisher_draws > 0:
        rows = [["word", "observed", "p_value", "draws", "seed", "mode"]]
        for w in words:
            t = _stage("fisher", fisher_test, data, design, w, cfg.fisher_draws, cfg.seed)
            fisher[w] = t.p_value
            rows.append([str(w), _fmt(t.observed), _fmt(t.p_value), str(t.draws), str(t.seed), t.mode])
        bundle.rows("fisher.csv", rows)

    header = ["word"]
    for m in results:
        header += [f"{m}_estimate", f"{m}_stderr", f"{m}_p"]
    if fisher:
        header.append("fisher_p")
    table = [header]
    for w in words:
        row = [str(w)]
        for m, ests in results.items():
            e = ests.get(w)
            if e is None:
                row += ["NA", "NA", "NA"]
                continue
            p = None
            if e.stderr:
                p = 2 * norm.sf(abs(e.estimate) / e.stderr)
            row += [_fmt(e.estimate), _fmt(e.stderr), _fmt(p)]
        if fisher:
            row.append(_fmt(fisher.get(w)))
        table.append(row)
    bundle.rows("comparison.csv", table)
    bundle.rows("units.csv", audit)


def cmd_pipeline(args) -> int:
    cfg = AnalysisConfig.from_file(args.config)
    if args.output:
        cfg.output = Path(args.output)
    if args.seed is not None:
        cfg.seed = args.seed
    out = run_pipeline(cfg)
    sys.stderr.write(f"wrote report bundle to {out}\n")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _data_args(p):
    p.add_argument("--data", required=True, help="delimited data file")
    p.add_argument("--schema", required=True, help="schema config file")
    p.add_argument("-o", "--out", default=None, help="output file (default: stdout)")


def _design_args(p):
    p.add_argument("--design", default="auto", help="design spec, 'full' or 'auto' (default)")
    p.add_argument("-p", type=int, default=1, help="fraction exponent used by 'auto' (default 1)")
    p.add_argument("--min-count", type=int, default=2, help="minimum units per run for 'auto' (default 2)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fracfactorial",
                                     description="Design-based analysis of two-level factorial data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", help="print runs, aliasing and resolution of a design")
    p.add_argument("spec", help="e.g. '2^(4-1): 4=-123'")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("counts", help="units per run and feasible fractions")
    _data_args(p)
    p.add_argument("-p", type=int, default=0, help="also list feasible 2^(k-p) fractions")
    p.add_argument("--min-count", type=int, default=2)
    p.set_defaults(func=cmd_counts)

    p = sub.add_parser("balance", help="Wilks balance test across design runs")
    _data_args(p)
    _design_args(p)
    p.add_argument("--covariates", help="comma-separated (default: all schema covariates)")
    p.add_argument("--method", default="permutation", choices=["permutation", "exact", "bartlett"])
    p.add_argument("--draws", type=int, default=2000)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("trim", help="sequentially trim units until balance is reached")
    _data_args(p)
    _design_args(p)
    p.add_argument("--covariates")
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--min-group-size", type=int, default=2)
    p.add_argument("--draws", type=int, default=2000)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_trim)

    p = sub.add_parser("estimate", help="effect estimates with Neyman variances")
    _data_args(p)
    _design_args(p)
    p.add_argument("--method", default="neyman", choices=list(METHODS))
    p.add_argument("--words", help="comma-separated effect words (default: all estimable)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("fisher", help="randomization tests of the sharp null")
    _data_args(p)
    _design_args(p)
    p.add_argument("--words")
    p.add_argument("--mode", default="monte-carlo", choices=["monte-carlo", "exact"])
    p.add_argument("--draws", type=int, default=999)
    p.add_argument("--seed", type=int)
    p.add_argument("--null-dir", help="write each null distribution here")
    p.set_defaults(func=cmd_fisher)

    p = sub.add_parser("pipeline", help="run the full analysis from a config file")
    p.add_argument("config")
    p.add_argument("--output", help="override the output directory")
    p.add_argument("--seed", type=int, help="override the seed")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FactorialError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
