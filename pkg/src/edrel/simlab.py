"""Simulation models, the Monte Carlo engine and table aggregation.

Three data-generating models are provided:

* Model 1: ``y = 2 + 3 x1^k + x2^2 + x1 e`` with ``x1, x2, e`` iid N(0, 1),
  response indicator ``logit P(delta=1|x) = t0 + t1 x1 + t2 x2 + t3 x1 x2``;
  target the mean of ``y``.
* Model 2: ``y1 = 2 + 3 x^k + e1``, ``y2 = 2 + 3 x^k + x e2`` jointly missing,
  ``logit P = t0 + t1 x + t2 x^2``; two moment conditions for one common mean.
* Model 3: ``x2 = 1 + x1 + y + e`` with ``x1 ~ Exp(1)``, ``y ~ chi2(1)``; the
  regressor ``y`` is missing, ``logit P = t0 + t1 x1 + t2 x2 + t3 x1 x2``;
  target the regression coefficients.

Every replicate draws from its own counter-based stream keyed by
``(seed, replicate)``, so results do not depend on the number of workers.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from ._parallel import pmap, replicate_rng
from .data import Dataset, EstimatingFunction, PropensityModel, RegressionModel, mean_response_function, term_design
from .errors import ConfigError, DesignMismatchError, EdrError
from .estimators import (EstimatorOptions, edr_mean_response, estimate_all, estimate_cca, estimate_edr,
                         estimate_el_profile, estimate_ht, estimate_rrz)

__all__ = [
    "SimDraw",
    "SimDesign",
    "SimCell",
    "CellStats",
    "TRUE_BETA",
    "WORKING_MODELS",
    "CSV_COLUMNS",
    "gen_model1",
    "gen_model2",
    "gen_model3",
    "generate",
    "build_models",
    "run_replicate",
    "run_monte_carlo",
    "summarize",
    "cells_to_csv",
    "parse_cells_csv",
    "format_table",
    "table_designs",
    "TABLE_TAUS",
    "design_options",
    "load_reference",
    "compare_with_reference",
    "comparison_to_csv",
    "format_comparison",
    "COMPARE_COLUMNS",
]

TRUE_BETA = {1: {1: 3.0, 2: 6.0, 4: 12.0}, 2: {1: 2.0, 2: 5.0, 4: 11.0}, 3: (1.0, 1.0, 1.0)}
TAU_LEN = {1: 4, 2: 3, 3: 4}
IMPLEMENTED = ("ALL", "CCA", "HT", "RRZ", "EDR", "EL-profile")

# Working designs keyed by (model, interaction coefficient is zero).  Model 1
# and 2 switch the regression form when the propensity is misspecified.
WORKING_MODELS = {
    (1, True): {"propensity": ("x1", "x2"), "regression": ("1", "x1^2", "x2^2")},
    (1, False): {"propensity": ("x1", "x2"), "regression": ("1", "x1^k", "x2^2")},
    (2, True): {"propensity": ("x1",), "regression": ("1", "x1^2")},
    (2, False): {"propensity": ("x1",), "regression": ("1", "x1^k")},
    (3, True): {"propensity": ("x1", "x2", "x1*x2"), "regression": ("1", "x1", "x2")},
    (3, False): {"propensity": ("x1", "x2", "x1*x2"), "regression": ("1", "x1", "x2")},
}

TABLE_TAUS = {
    1: [(1, 0, 0, 0), (1, 0.5, 0.5, 0), (0.5, -0.5, 0.5, 0), (0.5, 0.5, 1, 0), (0, 0.5, 1, 1), (-1, 0.5, 1, 1)],
    2: [(1, 0, 0), (1, 1, 0), (0.5, 0.5, 0), (0, 0.5, 0), (0, 1, 1), (-1, 1, 1)],
    3: [(1, 0, 0, 0), (-3, 2, 2, -1), (-2, 2, 2, -1), (-4, 2, 2, -1), (-2, 2, 2, -2)],
}

CSV_COLUMNS = ("model", "tau", "k", "estimator", "n", "reps", "bias", "rmse", "ev", "mv", "cp", "miss_rate", "failures")


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SimDraw:
    """Generated sample plus the oracle quantities hidden from the analyst."""

    ds: Dataset
    y_full: np.ndarray
    omega: np.ndarray
    beta_true: np.ndarray

    @property
    def full(self) -> Dataset:
        return Dataset.complete(self.ds.x, self.y_full)


def _draw_delta(eta, rng):
    omega = expit(eta)
    return (rng.random(eta.shape[0]) < omega).astype(np.int64), omega


def _check_tau(model, tau):
    tau = tuple(float(t) for t in tau)
    if len(tau) != TAU_LEN[model]:
        raise ConfigError(f"model {model} needs {TAU_LEN[model]} tau coefficients, got {len(tau)}")
    return tau


def gen_model1(n, k, tau, rng) -> SimDraw:
    if k not in (1, 2, 4):
        raise ConfigError(f"k must be 1, 2 or 4, got {k}")
    t = _check_tau(1, tau)
    x = rng.standard_normal((n, 2))
    e = rng.standard_normal(n)
    y = 2.0 + 3.0 * x[:, 0] ** k + x[:, 1] ** 2 + x[:, 0] * e
    delta, omega = _draw_delta(t[0] + t[1] * x[:, 0] + t[2] * x[:, 1] + t[3] * x[:, 0] * x[:, 1], rng)
    ds = Dataset(x, delta, y[delta == 1], dim_y=1)
    return SimDraw(ds, y.reshape(-1, 1), omega, np.array([TRUE_BETA[1][k]]))


def gen_model2(n, k, tau, rng) -> SimDraw:
    if k not in (1, 2, 4):
        raise ConfigError(f"k must be 1, 2 or 4, got {k}")
    t = _check_tau(2, tau)
    x = rng.standard_normal(n)
    e = rng.standard_normal((n, 2))
    base = 2.0 + 3.0 * x**k
    y = np.column_stack([base + e[:, 0], base + x * e[:, 1]])
    delta, omega = _draw_delta(t[0] + t[1] * x + t[2] * x**2, rng)
    ds = Dataset(x.reshape(-1, 1), delta, y[delta == 1], dim_y=2)
    return SimDraw(ds, y, omega, np.array([TRUE_BETA[2][k]]))


def gen_model3(n, tau, rng, y_dist="chi2") -> SimDraw:
    t = _check_tau(3, tau)
    x1 = rng.exponential(1.0, n)
    if y_dist == "chi2":
        y = rng.chisquare(1, n)
    elif y_dist == "normal":
        y = rng.standard_normal(n)
    else:
        raise ConfigError(f"unknown Model 3 y distribution {y_dist!r}")
    e = rng.standard_normal(n)
    b = TRUE_BETA[3]
    x2 = b[0] + b[1] * x1 + b[2] * y + e
    delta, omega = _draw_delta(t[0] + t[1] * x1 + t[2] * x2 + t[3] * x1 * x2, rng)
    ds = Dataset(np.column_stack([x1, x2]), delta, y[delta == 1], dim_y=1)
    return SimDraw(ds, y.reshape(-1, 1), omega, np.array(b))


# ---------------------------------------------------------------------------
# designs and working models
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SimDesign:
    model: int
    tau: tuple
    k: Optional[int] = None
    n: int = 200
    reps: int = 1000
    seed: int = 20240601
    estimators: tuple = ("ALL", "CCA", "HT", "RRZ", "EDR")
    working_propensity: Optional[tuple] = None
    working_regression: Optional[tuple] = None
    level: float = 0.95
    y_dist: str = "chi2"
    options: EstimatorOptions = field(default_factory=EstimatorOptions)

    def __post_init__(self):
        if self.model not in (1, 2, 3):
            raise ConfigError(f"model must be 1, 2 or 3, got {self.model}")
        object.__setattr__(self, "tau", _check_tau(self.model, self.tau))
        if self.model == 3 and self.k is not None:
            raise DesignMismatchError("Model 3 takes no exponent k")
        if self.model in (1, 2) and self.k not in (1, 2, 4):
            raise DesignMismatchError(f"model {self.model} needs k in (1, 2, 4)")
        if self.n < 20:
            raise ConfigError("n must be at least 20")
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        bad = [e for e in self.estimators if e not in IMPLEMENTED]
        if bad:
            raise ConfigError(f"unknown estimator tag(s): {', '.join(bad)}")
        object.__setattr__(self, "estimators", tuple(self.estimators))

    @property
    def interaction_zero(self) -> bool:
        return self.tau[-1] == 0.0

    @property
    def beta_true(self) -> np.ndarray:
        return np.array([TRUE_BETA[self.model][self.k]]) if self.model < 3 else np.array(TRUE_BETA[3])

    @property
    def working(self) -> dict:
        w = dict(WORKING_MODELS[(self.model, self.interaction_zero)])
        if self.working_propensity is not None:
            w["propensity"] = tuple(self.working_propensity)
        if self.working_regression is not None:
            w["regression"] = tuple(self.working_regression)
        return w

    def tau_str(self) -> str:
        return "(" + ",".join(f"{t:g}" for t in self.tau) + ")"


def generate(design: SimDesign, rng) -> SimDraw:
    if design.model == 1:
        return gen_model1(design.n, design.k, design.tau, rng)
    if design.model == 2:
        return gen_model2(design.n, design.k, design.tau, rng)
    return gen_model3(design.n, design.tau, rng, design.y_dist)


def regression_ef() -> EstimatingFunction:
    """``s = (1, x1, y)' {x2 - (b0 + b1 x1 + b2 y)}`` with ``x = (x1, x2)``."""

    def Z(x, y):
        return np.column_stack([np.ones(x.shape[0]), x[:, 0], y[:, 0]])

    def ev(x, y, b):
        z = Z(x, y)
        return z * (x[:, 1] - z @ b)[:, None]

    def jac(x, y, b):
        z = Z(x, y)
        return -z[:, :, None] * z[:, None, :]

    return EstimatingFunction(3, 3, ev, jac, name="linear-regression")


def regression_working_model(terms) -> RegressionModel:
    """``u = (1, x1, yhat)' {x2 - (b0 + b1 x1 + b2 yhat)}`` with ``yhat = features(x) alpha``."""
    feats = term_design(terms)

    def parts(x, b, a):
        F = feats(x)
        yh = F @ a
        z = np.column_stack([np.ones(x.shape[0]), x[:, 0], yh])
        return F, z, x[:, 1] - z @ b

    def u(x, b, a):
        _, z, res = parts(x, b, a)
        return z * res[:, None]

    def jb(x, b, a):
        _, z, _ = parts(x, b, a)
        return -z[:, :, None] * z[:, None, :]

    def ja(x, b, a):
        F, z, res = parts(x, b, a)
        du = -b[2] * z
        du[:, 2] += res
        return du[:, :, None] * F[:, None, :]

    return RegressionModel(u, feats.width, features=feats, u_jac_beta=jb, u_jac_alpha=ja)


def build_models(design: SimDesign):
    """``(ef, pm, rm)`` for a design, following its working-model rule."""
    w = design.working
    k = design.k
    pm = PropensityModel(term_design(w["propensity"], k))
    if design.model == 1:
        return mean_response_function(1), pm, RegressionModel.linear_mean(term_design(w["regression"], k), 1)
    if design.model == 2:
        return mean_response_function(2), pm, RegressionModel.linear_mean(term_design(w["regression"], k), 2)
    return regression_ef(), pm, regression_working_model(w["regression"])


# ---------------------------------------------------------------------------
# replicate and cell
# ---------------------------------------------------------------------------
def design_options(design: SimDesign) -> EstimatorOptions:
    """Estimator options used for a design.

    In Model 2 both working means share one feature map, so ``(u1, u2, 1)``
    spans only that map and one EL constraint column is always redundant; it
    is dropped rather than reported as an error.
    """
    if design.model == 2 and design.options.rank_policy == "error":
        return replace(design.options, rank_policy="drop")
    return design.options


def _run_one(tag, draw: SimDraw, ef, pm, rm, opts, cache):
    ds = draw.ds
    if tag == "ALL":
        return estimate_all(draw.full, ef, opts)
    if tag == "CCA":
        return estimate_cca(ds, ef, opts)
    if tag == "HT":
        return estimate_ht(ds, ef, pm, opts)
    if tag == "RRZ":
        return estimate_rrz(ds, ef, pm, rm, opts)
    if tag == "EDR":
        if ef.mean_response and ef.r == 1:
            rep = edr_mean_response(ds, pm, rm, opts)
        else:
            rep = estimate_edr(ds, ef, pm, rm, opts)
        cache["EDR"] = rep
        return rep
    if tag == "EL-profile":
        start = cache.get("EDR") or estimate_edr(ds, ef, pm, rm, replace(opts, covariance=False))
        return estimate_el_profile(ds, ef, pm, rm, opts, start=start)
    raise ConfigError(f"unknown estimator tag {tag!r}")


def run_replicate(design: SimDesign, index: int):
    """One replicate: ``(missing_rate, {tag: (beta_hat, se) or None})``."""
    rng = replicate_rng(design.seed, index)
    draw = generate(design, rng)
    ef, pm, rm = build_models(design)
    opts = design_options(design)
    out = {}
    cache = {}
    for tag in design.estimators:
        try:
            rep = _run_one(tag, draw, ef, pm, rm, opts, cache)
        except EdrError:
            out[tag] = None
            continue
        if not rep.converged or not np.all(np.isfinite(rep.beta_hat)):
            out[tag] = None
            continue
        se = rep.se if rep.se is not None else np.full(rep.beta_hat.size, np.nan)
        out[tag] = (np.asarray(rep.beta_hat, dtype=float), np.asarray(se, dtype=float))
    return draw.ds.missing_rate, out


@dataclass
class CellStats:
    estimator: str
    coord: int
    bias: float
    rmse: float
    ev: float
    mv: float
    cp: float
    failures: int
    se_failures: int = 0

    @property
    def mse(self):
        return self.rmse**2


@dataclass
class SimCell:
    """Aggregated Monte Carlo results of one design.

    ``estimates[tag]`` and ``ses[tag]`` hold the per-replicate values as
    ``(reps, p)`` arrays with NaN rows for failed replicates.
    """

    design: SimDesign
    stats: list
    miss_rate: float
    estimates: dict
    ses: dict

    def get(self, estimator, coord=1) -> CellStats:
        for s in self.stats:
            if s.estimator == estimator and s.coord == coord:
                return s
        raise KeyError((estimator, coord))

    @property
    def flagged(self):
        """Estimators whose failure share exceeds 2%."""
        return sorted({s.estimator for s in self.stats if s.failures > 0.02 * self.design.reps})


def _aggregate(design: SimDesign, results) -> SimCell:
    beta = design.beta_true
    p = beta.size
    z = norm.ppf(0.5 + design.level / 2.0)
    miss = float(np.mean([r[0] for r in results]))
    stats, ests, ses = [], {}, {}
    for tag in design.estimators:
        B = np.full((len(results), p), np.nan)
        S = np.full((len(results), p), np.nan)
        for i, (_, out) in enumerate(results):
            if out.get(tag) is not None:
                B[i], S[i] = out[tag]
        ests[tag], ses[tag] = B, S
        ok = ~np.isnan(B).any(axis=1)
        fails = int((~ok).sum())
        for j in range(p):
            d = B[ok, j] - beta[j]
            m = d.size
            if m == 0:
                stats.append(CellStats(tag, j + 1, np.nan, np.nan, np.nan, np.nan, np.nan, fails))
                continue
            bias = float(d.mean())
            rmse = float(np.sqrt(np.mean(d**2)))
            ev = float(B[ok, j].var(ddof=1)) if m > 1 else 0.0
            se = S[ok, j]
            fin = np.isfinite(se)
            mv = float(np.mean(se[fin] ** 2)) if fin.any() else np.nan
            cp = float(np.mean(np.abs(d[fin]) <= z * se[fin])) if fin.any() else np.nan
            stats.append(CellStats(tag, j + 1, bias, rmse, ev, mv, cp, fails, int((~fin).sum())))
    return SimCell(design, stats, miss, ests, ses)


def run_monte_carlo(design: SimDesign, jobs: int = 1) -> SimCell:
    """Run ``design.reps`` replicates and aggregate them in replicate order."""
    results = pmap(lambda i: run_replicate(design, i), range(design.reps), jobs)
    return _aggregate(design, results)


# ---------------------------------------------------------------------------
# tables and CSV
# ---------------------------------------------------------------------------
def _tag(cell: SimCell, s: CellStats):
    return s.estimator if cell.design.beta_true.size == 1 else f"{s.estimator}.beta{s.coord}"


def summarize(cells: Sequence[SimCell]) -> list:
    """Flat rows (dicts keyed by :data:`CSV_COLUMNS`) ordered by (model, tau, k, estimator)."""
    order = {t: i for i, t in enumerate(IMPLEMENTED)}
    rows = []
    for c in cells:
        d = c.design
        for s in c.stats:
            rows.append({"model": d.model, "tau": d.tau_str(), "k": "" if d.k is None else d.k,
                         "estimator": _tag(c, s), "n": d.n, "reps": d.reps, "bias": s.bias, "rmse": s.rmse,
                         "ev": s.ev, "mv": s.mv, "cp": s.cp, "miss_rate": c.miss_rate, "failures": s.failures,
                         "_key": (d.model, d.tau, -1 if d.k is None else d.k, order[s.estimator], s.coord)})
    rows.sort(key=lambda r: r["_key"])
    for r in rows:
        del r["_key"]
    return rows


def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else repr(v)
    return str(v)


def cells_to_csv(rows, path=None) -> str:
    """Write summary rows as CSV (full precision); returns the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def parse_cells_csv(text_or_path) -> list:
    text = text_or_path
    if "\n" not in str(text_or_path):
        with open(text_or_path, newline="") as fh:
            text = fh.read()
    rd = csv.DictReader(io.StringIO(text))
    if tuple(rd.fieldnames or ()) != CSV_COLUMNS:
        raise ConfigError(f"unexpected CSV columns {rd.fieldnames}")
    out = []
    for rec in rd:
        row = {}
        for c in CSV_COLUMNS:
            v = rec[c]
            if c in ("model", "n", "reps", "failures"):
                row[c] = int(v)
            elif c == "k":
                row[c] = int(v) if v else ""
            elif c in ("tau", "estimator"):
                row[c] = v
            else:
                row[c] = float(v)
        out.append(row)
    return out


def format_table(rows, kind="bias-rmse") -> str:
    """Plain-text table; ``kind`` is ``bias-rmse`` or ``ev-mv-cp``."""
    if kind not in ("bias-rmse", "ev-mv-cp"):
        raise ValueError(f"unknown table kind {kind!r}")
    head = ["model", "tau", "k", "estimator", "miss"]
    head += ["bias", "rmse"] if kind == "bias-rmse" else ["EV", "MV", "CP"]
    lines = []
    for r in rows:
        vals = [str(r["model"]), r["tau"], str(r["k"]), r["estimator"], f"{r['miss_rate']:.2f}"]
        if kind == "bias-rmse":
            vals += [f"{r['bias']:.4f}", f"{r['rmse']:.4f}"]
        else:
            vals += [f"{r['ev']:.4f}", f"{r['mv']:.4f}", f"{r['cp']:.3f}"]
        lines.append(vals)
    widths = [max(len(h), *(len(l[i]) for l in lines)) if lines else len(h) for i, h in enumerate(head)]
    fmt = lambda vals: "  ".join(v.rjust(w) for v, w in zip(vals, widths))
    return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(l) for l in lines]) + "\n"


def table_designs(table: int, reps=1000, n=200, seed=20240601, estimators=None, ks=(1, 2, 4)) -> list:
    """Cell grid behind one of the six tables (4-6 share the cells of 1-3)."""
    if table not in range(1, 7):
        raise ConfigError(f"table must be 1..6, got {table}")
    model = (table - 1) % 3 + 1
    est = estimators or (("ALL", "CCA", "HT", "RRZ", "EDR") if table <= 3 else ("HT", "RRZ", "EDR"))
    out = []
    for tau in TABLE_TAUS[model]:
        if model == 3:
            out.append(SimDesign(3, tau, None, n, reps, seed, tuple(est)))
        else:
            out.extend(SimDesign(model, tau, k, n, reps, seed, tuple(est)) for k in ks)
    return out


# ---------------------------------------------------------------------------
# reference numbers and comparison
# ---------------------------------------------------------------------------
COMPARE_COLUMNS = ("table", "model", "tau", "k", "estimator", "coord", "metric", "reference", "ours", "tol", "status")


def load_reference(table: Optional[int] = None) -> list:
    """Bundled reference cells (``data/reference_cells.csv``), optionally for one table."""
    from importlib import resources

    text = resources.files("edrel").joinpath("data/reference_cells.csv").read_text()
    rows = csv.DictReader(line for line in io.StringIO(text) if not line.startswith("#"))
    out = []
    for r in rows:
        if table is not None and int(r["table"]) != table:
            continue
        rec = {"table": int(r["table"]), "model": int(r["model"]), "tau": r["tau"],
               "k": int(r["k"]) if r["k"] else None, "estimator": r["estimator"], "coord": int(r["coord"]),
               "stat_kind": r["stat_kind"]}
        for c in ("bias", "stat", "ev", "mv", "cp"):
            rec[c] = float(r[c]) if r[c] else None
        out.append(rec)
    return out


def _mc_se(metric, est, se, truth):
    """Monte Carlo standard error of one cell metric from the raw replicates."""
    m = est.size
    d = est - truth
    if metric == "bias":
        return float(np.std(est, ddof=1) / np.sqrt(m))
    if metric == "mse":
        return float(np.std(d**2, ddof=1) / np.sqrt(m))
    if metric == "rmse":
        return float(np.std(d**2, ddof=1) / np.sqrt(m) / (2.0 * max(np.sqrt(np.mean(d**2)), 1e-300)))
    if metric == "ev":
        return float(np.std((est - est.mean()) ** 2, ddof=1) / np.sqrt(m))
    if metric == "mv":
        return float(np.std(se**2, ddof=1) / np.sqrt(m))
    if metric == "cp":
        c = min(max(cp_val(d, se), 1.0 / m), 1.0 - 1.0 / m)
        return float(np.sqrt(c * (1.0 - c) / m))
    raise ValueError(metric)


def cp_val(d, se, level=0.95):
    return float(np.mean(np.abs(d) <= norm.ppf(0.5 + level / 2.0) * se))


def compare_with_reference(cells: Sequence[SimCell], table: int, z: float = 3.0) -> list:
    """Side-by-side rows for the reference cells matching ``cells``.

    The tolerance of each metric is ``z * sqrt(2)`` Monte Carlo standard
    errors (both numbers are Monte Carlo estimates).  Cells with ``k = 4`` are
    reported with status ``info``; reference estimators not implemented here
    are skipped.
    """
    index = {}
    for c in cells:
        d = c.design
        index[(d.model, d.tau_str(), d.k)] = c
    out = []
    for ref in load_reference(table):
        cell = index.get((ref["model"], ref["tau"], ref["k"]))
        if cell is None or ref["estimator"] not in cell.estimates:
            continue
        j = ref["coord"] - 1
        B = cell.estimates[ref["estimator"]][:, j]
        S = cell.ses[ref["estimator"]][:, j]
        ok = np.isfinite(B)
        B, S = B[ok], S[ok]
        truth = cell.design.beta_true[j]
        st = cell.get(ref["estimator"], ref["coord"])
        if table <= 3:
            kind = ref["stat_kind"]
            metrics = [("bias", ref["bias"], st.bias), (kind, ref["stat"], st.mse if kind == "mse" else st.rmse)]
        else:
            metrics = [("ev", ref["ev"], st.ev), ("mv", ref["mv"], st.mv), ("cp", ref["cp"], st.cp)]
        for name, ref_value, ours in metrics:
            if ref_value is None:
                continue
            fin = np.isfinite(S)
            if name in ("mv", "cp"):
                B_, S_ = B[fin], S[fin]
            else:
                B_, S_ = B, S
            if B_.size < 2:
                tol, status = np.nan, "fail"
            else:
                tol = z * np.sqrt(2.0) * _mc_se(name, B_, S_, truth)
                status = "info" if ref["k"] == 4 else ("pass" if abs(ours - ref_value) <= tol else "fail")
            out.append({"table": table, "model": ref["model"], "tau": ref["tau"],
                        "k": "" if ref["k"] is None else ref["k"], "estimator": ref["estimator"],
                        "coord": ref["coord"], "metric": name, "reference": ref_value, "ours": ours, "tol": tol,
                        "status": status})
    return out


def comparison_to_csv(rows, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) if isinstance(r[c], float) else r[c] for c in COMPARE_COLUMNS])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def format_comparison(rows) -> str:
    head = ("tau", "k", "estimator", "coord", "metric", "reference", "ours", "tol", "status")
    lines = [[str(r["tau"]), str(r["k"]), r["estimator"], str(r["coord"]), r["metric"], f"{r['reference']:.4f}",
              f"{r['ours']:.4f}", f"{r['tol']:.4f}", r["status"]] for r in rows]
    widths = [max(len(h), *(len(l[i]) for l in lines)) if lines else len(h) for i, h in enumerate(head)]
    fmt = lambda vals: "  ".join(v.rjust(w) for v, w in zip(vals, widths))
    n_pass = sum(r["status"] == "pass" for r in rows)
    n_fail = sum(r["status"] == "fail" for r in rows)
    n_info = sum(r["status"] == "info" for r in rows)
    tail = f"{n_pass} pass, {n_fail} fail, {n_info} info (k=4, not graded)"
    return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(l) for l in lines] + [tail]) + "\n"
