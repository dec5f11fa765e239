"""Plug-in sandwich covariances, Wald intervals and the nonparametric bootstrap."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

from . import _moments as M
from ._parallel import pmap, replicate_rng
from .data import Dataset, Diagnostic, EstimatingFunction, PropensityModel, RegressionModel
from .errors import BootstrapError, EdrError
from .estimators import EstimateReport

__all__ = [
    "CovarianceReport",
    "wald_ci",
    "covariance_from_parts",
    "var_ht",
    "var_rrz",
    "var_edr",
    "var_from_report",
    "bootstrap_se",
]


@dataclass(frozen=True)
class CovarianceReport:
    """Covariance of ``beta_hat``.

    ``sigma_hat`` is the asymptotic covariance of ``sqrt(n)(beta_hat - beta)``;
    ``se = sqrt(diag(sigma_hat) / n)``.
    """

    method: str
    sigma_hat: np.ndarray
    se: np.ndarray
    ci: np.ndarray
    source: str
    level: float = 0.95
    n: int = 0
    diagnostics: list = field(default_factory=list)
    replicates: np.ndarray = None
    failures: int = 0

    @property
    def cov(self):
        return self.sigma_hat / self.n


def wald_ci(beta, se, level=0.95):
    """``beta_j -/+ z_{1 - a/2} se_j`` as a ``(p, 2)`` array."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    z = norm.ppf(0.5 + level / 2.0)
    beta = np.atleast_1d(beta)
    return np.column_stack([beta - z * se, beta + z * se])


def _psd_check(S, diags):
    ev = np.linalg.eigvalsh(0.5 * (S + S.T))
    if ev.size and ev.min() < -1e-10 * max(np.trace(S), 1e-300):
        diags.append(Diagnostic("not-psd", f"covariance has a negative eigenvalue {ev.min():.3e}"))


def covariance_from_parts(method, beta, parts: M.SandwichParts, level=0.95) -> CovarianceReport:
    diags = list(parts.diagnostics)
    S = parts.sigma()
    _psd_check(S, diags)
    n = parts.n
    se = np.sqrt(np.clip(np.diag(S), 0.0, None) / n)
    return CovarianceReport(method, S, se, wald_ci(beta, se, level), "sandwich", level, n, diags)


def var_ht(report: EstimateReport, ds: Dataset, ef: EstimatingFunction, pm: PropensityModel, level=0.95):
    """Sandwich ``(V12' V11^{-1} V12)^{-1}`` at ``(beta_hat, gamma_hat)``."""
    P = M.Problem(ds, ef, pm)
    parts = M.ht_parts(P, report.beta_hat, report.theta_hat["gamma"])
    return covariance_from_parts("HT", report.beta_hat, parts, level)


def var_rrz(report: EstimateReport, ds: Dataset, ef: EstimatingFunction, pm: PropensityModel,
            rm: RegressionModel, level=0.95):
    """Sandwich ``(V22' V21^{-1} V22)^{-1}`` with the stacked score ``(U1, U2)``."""
    P = M.Problem(ds, ef, pm, rm)
    th = report.theta_hat
    parts = M.rrz_parts(P, report.beta_hat, th["gamma"], th["alpha"])
    return covariance_from_parts("RRZ", report.beta_hat, parts, level)


def var_edr(report: EstimateReport, ds: Dataset, ef: EstimatingFunction, pm: PropensityModel,
            rm: RegressionModel, level=0.95):
    """Sandwich ``(V32' V31^{-1} V32)^{-1}`` with the stacked score ``(U1, U2, U3)``."""
    P = M.Problem(ds, ef, pm, rm)
    th = report.theta_hat
    kept = report.el_state.kept if report.el_state is not None else None
    parts = M.edr_parts(P, report.beta_hat, th["gamma"], th["alpha"], th["lambda"], kept=kept)
    return covariance_from_parts("EDR", report.beta_hat, parts, level)


def var_from_report(report: EstimateReport, level=0.95) -> CovarianceReport:
    """Covariance from the blocks an estimator stored at its solution."""
    if report.parts is None:
        raise ValueError(f"{report.method} report carries no sandwich blocks")
    return covariance_from_parts(report.method, report.beta_hat, report.parts, level)


def bootstrap_se(ds: Dataset, estimator: Callable[[Dataset], EstimateReport], B: int = 500, seed: int = 0,
                 level=0.95, jobs=1, max_fail=0.05, point=None, method="bootstrap") -> CovarianceReport:
    """Nonparametric bootstrap over whole rows ``(x, y, delta)``.

    ``estimator(ds)`` must refit everything (nuisances included) and return
    an :class:`EstimateReport`.  Replicate ``b`` draws its rows from the
    stream keyed by ``(seed, b)``.  Replicates that raise or do not converge
    are dropped; more than ``max_fail`` of them is an error.  The interval is
    centred at ``point`` (default: the estimate on ``ds`` itself).
    """
    if B < 50:
        raise ValueError("bootstrap needs B >= 50")
    n = ds.n

    def one(b):
        idx = replicate_rng(seed, b).integers(0, n, n)
        try:
            rep = estimator(ds.subset(idx))
        except EdrError:
            return None
        if not rep.converged or not np.all(np.isfinite(rep.beta_hat)):
            return None
        return np.asarray(rep.beta_hat, dtype=float)

    out = pmap(one, range(B), jobs)
    ok = [b for b in out if b is not None]
    fails = B - len(ok)
    if fails > max_fail * B:
        raise BootstrapError(f"{fails} of {B} bootstrap replicates failed (limit {max_fail:.0%})")
    reps = np.vstack(ok)
    se = reps.std(axis=0, ddof=1)
    centre = estimator(ds).beta_hat if point is None else np.atleast_1d(point)
    diags = [Diagnostic("bootstrap-failures", f"{fails} replicate(s) dropped")] if fails else []
    sigma = np.atleast_2d(np.cov(reps.T, ddof=1)) * n
    return CovarianceReport(method, sigma, se, wald_ci(centre, se, level), "bootstrap", level, n, diags, reps, fails)
