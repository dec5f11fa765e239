"""Mean-response analysis of tabular data, including the two-group contrast.

In the two-group workflow the outcome of group 1 is treated as observed on
the group-1 rows and missing elsewhere (``delta = group``) to estimate
``mu1``, and symmetrically with ``delta = 1 - group`` for ``mu0``.  The
contrast is ``Delta = mu1 - mu0``.  Sandwich standard errors of ``Delta``
come from the difference of the two influence rows on the same sample; the
bootstrap resamples whole rows and re-estimates both means on each resample.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset, PropensityModel, RegressionModel, mean_response_function, term_design
from .errors import DataError, EdrError
from .estimators import EstimatorOptions, edr_mean_response, estimate_cca, estimate_ht, estimate_rrz
from .inference import bootstrap_se, wald_ci

__all__ = [
    "Table",
    "read_table",
    "write_table",
    "synthetic_lalonde",
    "name_terms",
    "GroupResult",
    "AnalysisRow",
    "AnalysisReport",
    "analyze_mean",
    "analyze_two_group",
    "format_report",
    "ANALYZE_ESTIMATORS",
]

ANALYZE_ESTIMATORS = ("CCA", "HT", "RRZ", "EDR")
LALONDE_COLUMNS = ("age", "educ", "black", "hisp", "married", "nodegr", "re74", "re75", "re78", "treat")


@dataclass(frozen=True)
class Table:
    """Column-oriented numeric table; ``None`` entries mark missing values."""

    columns: dict
    n: int

    def numeric(self, name, allow_missing=False) -> np.ndarray:
        if name not in self.columns:
            raise DataError(f"column {name!r} not found")
        col = self.columns[name]
        if not allow_missing and any(v is None for v in col):
            raise DataError(f"column {name!r} has missing values")
        return np.array([np.nan if v is None else v for v in col], dtype=float)


def read_table(path, missing_token="NA") -> Table:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        rd = csv.DictReader(fh)
        names = rd.fieldnames or []
        cols = {c: [] for c in names}
        for lineno, rec in enumerate(rd, start=2):
            for c in names:
                raw = (rec[c] or "").strip()
                if raw == missing_token or raw == "":
                    cols[c].append(None)
                    continue
                try:
                    cols[c].append(float(raw))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric value {raw!r} in column {c!r}") from None
    n = len(next(iter(cols.values()))) if cols else 0
    if n == 0:
        raise DataError(f"{path} has no data rows")
    return Table(cols, n)


def write_table(table: Table, path, missing_token="NA"):
    names = list(table.columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for i in range(table.n):
            w.writerow([missing_token if table.columns[c][i] is None else repr(float(table.columns[c][i]))
                        for c in names])


def synthetic_lalonde(seed=1986, n_treated=185, n_control=260) -> Table:
    """Synthetic stand-in with the shape of the job-training earnings data.

    Treatment depends on ``hisp`` and ``nodegr`` through a logistic model; the
    1978 earnings are linear in ``educ`` for the treated and in ``black`` and
    ``re74`` for the controls, so the working models of the two-group
    analysis are correctly specified.  Treatment is redrawn until the group
    sizes match exactly.
    """
    rng = np.random.default_rng(seed)
    n = n_treated + n_control
    age = np.round(rng.gamma(9.0, 2.8, n) + 17.0)
    educ = np.clip(np.round(rng.normal(10.2, 1.8, n)), 3, 16)
    black = (rng.random(n) < 0.83).astype(float)
    hisp = ((1.0 - black) * (rng.random(n) < 0.55)).astype(float)
    married = (rng.random(n) < 0.17).astype(float)
    nodegr = (educ < 12).astype(float)
    re74 = np.where(rng.random(n) < 0.73, 0.0, rng.gamma(1.3, 6000.0, n))
    re75 = np.where(rng.random(n) < 0.65, 0.0, 0.6 * re74 + rng.gamma(1.3, 2500.0, n))
    p_treat = expit(0.15 - 0.85 * hisp - 0.6 * nodegr)
    while True:
        treat = (rng.random(n) < p_treat).astype(float)
        if int(treat.sum()) == n_treated:
            break
    e = rng.normal(0.0, 1.0, n)
    y1 = 1500.0 + 550.0 * educ + 6000.0 * e
    y0 = 5500.0 - 1300.0 * black + 0.17 * re74 + 5000.0 * e
    re78 = np.maximum(np.where(treat == 1.0, y1, y0), 0.0)
    cols = dict(zip(LALONDE_COLUMNS, (age, educ, black, hisp, married, nodegr, re74, re75, re78, treat)))
    return Table({k: [float(v) for v in vals] for k, vals in cols.items()}, n)


def name_terms(terms: Sequence[str], covariates: Sequence[str]) -> tuple:
    """Translate terms over column names (``educ``, ``age^2``, ``black*re74``) to ``x<j>`` terms."""
    pos = {c: j + 1 for j, c in enumerate(covariates)}
    out = []
    for term in terms:
        term = term.strip()
        if term == "1":
            out.append("1")
            continue
        facs = []
        for fac in term.split("*"):
            base, sep, power = fac.strip().partition("^")
            if base not in pos:
                raise DataError(f"term {term!r} uses {base!r}, which is not among the covariates")
            facs.append(f"x{pos[base]}" + (f"^{power}" if sep else ""))
        out.append("*".join(facs))
    return tuple(out)


@dataclass
class GroupResult:
    estimate: float
    se_sandwich: Optional[float]
    influence: Optional[np.ndarray]
    converged: bool
    diagnostics: list = field(default_factory=list)


@dataclass
class AnalysisRow:
    estimator: str
    names: tuple
    estimate: np.ndarray
    se_sandwich: np.ndarray
    se_bootstrap: np.ndarray
    ci_sandwich: np.ndarray
    ci_bootstrap: np.ndarray
    bootstrap_failures: int = 0
    diagnostics: list = field(default_factory=list)

    def as_dict(self):
        def clean(a):
            return [None if not np.isfinite(v) else float(v) for v in np.asarray(a, dtype=float).ravel()]
        return {"estimator": self.estimator,
                "quantities": {nm: {"estimate": clean(self.estimate)[j], "se_sandwich": clean(self.se_sandwich)[j],
                                    "se_bootstrap": clean(self.se_bootstrap)[j],
                                    "ci_sandwich": clean(self.ci_sandwich[j]),
                                    "ci_bootstrap": clean(self.ci_bootstrap[j])}
                               for j, nm in enumerate(self.names)},
                "bootstrap_failures": self.bootstrap_failures,
                "diagnostics": [str(d) for d in self.diagnostics]}


@dataclass
class AnalysisReport:
    kind: str
    n: int
    group_sizes: tuple
    rows: list
    level: float
    bootstrap_b: int

    def as_dict(self):
        return {"kind": self.kind, "n": self.n, "group_sizes": list(self.group_sizes), "level": self.level,
                "bootstrap_b": self.bootstrap_b, "estimators": [r.as_dict() for r in self.rows]}

    def row(self, estimator) -> AnalysisRow:
        for r in self.rows:
            if r.estimator == estimator:
                return r
        raise KeyError(estimator)


def _one_mean(tag, ds: Dataset, pm, rm, opts: EstimatorOptions, want_influence=True) -> GroupResult:
    ef = mean_response_function(1)
    if tag == "CCA":
        rep = estimate_cca(ds, ef, opts)
    elif tag == "HT":
        rep = estimate_ht(ds, ef, pm, opts)
    elif tag == "RRZ":
        rep = estimate_rrz(ds, ef, pm, rm, opts)
    elif tag == "EDR":
        rep = edr_mean_response(ds, pm, rm, opts)
    else:
        raise DataError(f"estimator {tag!r} is not available for data analysis")
    se = float(rep.se[0]) if rep.se is not None else None
    infl = None
    if want_influence and rep.parts is not None and tag != "CCA":
        infl = rep.influence()[:, 0]
    return GroupResult(float(rep.beta_hat[0]), se, infl, rep.converged, list(rep.diagnostics))


def _group_dataset(x, y, delta, label) -> Dataset:
    if delta.sum() == 0:
        raise DataError(f"group {label} has no observed outcomes")
    obs = y[delta == 1]
    if np.any(~np.isfinite(obs)):
        raise DataError(f"group {label} has missing outcome values")
    return Dataset(x, delta, obs.reshape(-1, 1), dim_y=1)


class _Result:
    """Minimal report for the bootstrap engine."""

    def __init__(self, beta):
        self.beta_hat = np.asarray(beta, dtype=float)
        self.converged = bool(np.all(np.isfinite(self.beta_hat)))


def _with_intercept(terms):
    terms = tuple(t.strip() for t in terms)
    return terms if terms and terms[0] == "1" else ("1",) + tuple(t for t in terms if t != "1")


def _models(covariates, prop_terms, reg_terms):
    """Working models over named terms; both always carry an intercept."""
    pm = PropensityModel(term_design(_with_intercept(name_terms(prop_terms, covariates))))
    rm = RegressionModel.linear_mean(term_design(_with_intercept(name_terms(reg_terms, covariates))), 1)
    return pm, rm


def analyze_two_group(table: Table, outcome: str, group: str, covariates: Sequence[str],
                      propensity_terms: Sequence[str], regression_terms1: Sequence[str],
                      regression_terms0: Sequence[str], estimators=ANALYZE_ESTIMATORS, B=500, seed=0,
                      level=0.95, jobs=1, options: EstimatorOptions = None) -> AnalysisReport:
    """Estimate ``mu1``, ``mu0`` and ``Delta`` with sandwich and bootstrap standard errors."""
    opts = options or EstimatorOptions()
    x = np.column_stack([table.numeric(c) for c in covariates]) if covariates else np.zeros((table.n, 0))
    y = table.numeric(outcome, allow_missing=True)
    g = table.numeric(group)
    if not np.all(np.isin(g, (0.0, 1.0))):
        raise DataError(f"group column {group!r} must be 0/1")
    d1 = g.astype(np.int64)
    d0 = 1 - d1
    pm1, rm1 = _models(covariates, propensity_terms, regression_terms1)
    pm0, rm0 = _models(covariates, propensity_terms, regression_terms0)
    ds1 = _group_dataset(x, y, d1, 1)
    ds0 = _group_dataset(x, y, d0, 0)
    rows = []
    for tag in estimators:
        r1 = _one_mean(tag, ds1, pm1, rm1, opts)
        r0 = _one_mean(tag, ds0, pm0, rm0, opts)
        est = np.array([r1.estimate, r0.estimate, r1.estimate - r0.estimate])
        if r1.influence is not None and r0.influence is not None:
            d_if = r1.influence - r0.influence
            se_d = float(np.sqrt(np.mean(d_if**2) / table.n))
        elif r1.se_sandwich is not None and r0.se_sandwich is not None:
            # complete cases of the two groups are disjoint
            se_d = float(np.hypot(r1.se_sandwich, r0.se_sandwich))
        else:
            se_d = np.nan
        se_s = np.array([np.nan if r1.se_sandwich is None else r1.se_sandwich,
                         np.nan if r0.se_sandwich is None else r0.se_sandwich, se_d])
        fast = replace(opts, covariance=False)

        def boot(ds_b, tag=tag):
            y_b = np.zeros(ds_b.n)
            y_b[ds_b.y_present] = ds_b.y_obs[:, 0]
            grp = ds_b.x[:, -1].astype(np.int64)
            xb = ds_b.x[:, :-1]
            try:
                a = _one_mean(tag, _group_dataset(xb, y_b, grp, 1), pm1, rm1, fast, False).estimate
                b = _one_mean(tag, _group_dataset(xb, y_b, 1 - grp, 0), pm0, rm0, fast, False).estimate
            except EdrError:
                return _Result([np.nan] * 3)
            return _Result([a, b, a - b])

        # every row carries its outcome; the group is appended as the last column
        full = Dataset(np.column_stack([x, g]), np.ones(table.n, dtype=np.int64),
                       np.nan_to_num(y).reshape(-1, 1), dim_y=1)
        bs = bootstrap_se(full, boot, B=B, seed=seed, level=level, jobs=jobs, point=est)
        rows.append(AnalysisRow(tag, ("mu1", "mu0", "Delta"), est, se_s, bs.se, wald_ci(est, se_s, level), bs.ci,
                                bs.failures, r1.diagnostics + r0.diagnostics))
    return AnalysisReport("two-group", table.n, (int(d1.sum()), int(d0.sum())), rows, level, B)


def analyze_mean(table: Table, outcome: str, covariates: Sequence[str], propensity_terms: Sequence[str],
                 regression_terms: Sequence[str], estimators=ANALYZE_ESTIMATORS, B=500, seed=0, level=0.95,
                 jobs=1, options: EstimatorOptions = None) -> AnalysisReport:
    """Mean of an outcome with missing values (missing rows have ``delta = 0``)."""
    opts = options or EstimatorOptions()
    x = np.column_stack([table.numeric(c) for c in covariates]) if covariates else np.zeros((table.n, 0))
    y = table.numeric(outcome, allow_missing=True)
    delta = np.isfinite(y).astype(np.int64)
    ds = _group_dataset(x, y, delta, "(all)")
    pm, rm = _models(covariates, propensity_terms, regression_terms)
    rows = []
    fast = replace(opts, covariance=False)
    for tag in estimators:
        r = _one_mean(tag, ds, pm, rm, opts, False)
        est = np.array([r.estimate])
        se_s = np.array([np.nan if r.se_sandwich is None else r.se_sandwich])

        def boot(ds_b, tag=tag):
            try:
                return _Result([_one_mean(tag, ds_b, pm, rm, fast, False).estimate])
            except EdrError:
                return _Result([np.nan])

        bs = bootstrap_se(ds, boot, B=B, seed=seed, level=level, jobs=jobs, point=est)
        rows.append(AnalysisRow(tag, ("mu",), est, se_s, bs.se, wald_ci(est, se_s, level), bs.ci, bs.failures,
                                r.diagnostics))
    return AnalysisReport("mean", table.n, (int(delta.sum()), int(table.n - delta.sum())), rows, level, B)


def format_report(rep: AnalysisReport) -> str:
    lines = [f"{rep.kind} analysis, n = {rep.n}, groups/observed = {rep.group_sizes}, "
             f"bootstrap B = {rep.bootstrap_b}, level = {rep.level:g}",
             f"{'estimator':>9}  {'quantity':>8}  {'estimate':>12}  {'se(sandwich)':>12}  {'se(bootstrap)':>13}"]
    for r in rep.rows:
        for j, nm in enumerate(r.names):
            ss = "-" if not np.isfinite(r.se_sandwich[j]) else f"{r.se_sandwich[j]:.4f}"
            lines.append(f"{r.estimator:>9}  {nm:>8}  {r.estimate[j]:12.4f}  {ss:>12}  {r.se_bootstrap[j]:13.4f}")
    return "\n".join(lines) + "\n"
