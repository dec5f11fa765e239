"""Outer solvers for beta: full data, complete cases, HT, RRZ, EDR and profile EL.

All estimators share :func:`solve_outer`, a damped Newton root finder.  For
``r > p`` the moment conditions are combined with a ``p x r`` weighting
matrix; ``weighting="two-step"`` first solves with the fixed matrix
``G(beta0)'`` and then re-solves with the plug-in optimal weighting
``V2' V1^{-1}`` evaluated at the first-stage estimate.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize

from . import _moments as M
from .data import (Dataset, Diagnostic, EstimatingFunction, PropensityModel, RegressionModel,
                   complete_cases, fd_step, mean_response_function)
from .el import ELState, solve_lambda
from .errors import ConfigError, DataError, EdrError, InfeasibleError, NonConvergenceError, SingularMatrixError
from .nuisance import c3_diagnostic, fit_propensity, fit_regression, propensity_scores

__all__ = [
    "EstimatorOptions",
    "EstimateReport",
    "OuterTrace",
    "solve_outer",
    "estimate_all",
    "estimate_cca",
    "estimate_ht",
    "estimate_rrz",
    "estimate_edr",
    "edr_mean_response",
    "profile_el_loglik",
    "estimate_el_profile",
    "fit_nuisances",
    "METHODS",
]


METHODS = ("ALL", "CCA", "HT", "RRZ", "EDR", "EL-profile")


@dataclass(frozen=True)
class EstimatorOptions:
    """Solver configuration shared by all estimators.

    Attributes
    ----------
    weighting : {"auto", "identity", "two-step"}
        ``auto`` means identity for ``r == p`` and two-step for ``r > p``.
    jacobian : {"fd", "analytic"}
        Outer Jacobian of the EDR residual.  ``fd`` differentiates the full
        nested map, re-solving the multiplier per perturbation; ``analytic``
        uses the implicit derivative of the multiplier.
    cca_divisor : {"n_complete", "n"}
        Divisor of the complete-case mean.  ``n`` reproduces the convention
        ``n^{-1} sum delta_i y_i`` and is only defined for the mean response.
    rank_policy : {"error", "drop"}
        Handling of linearly dependent EL constraint columns.
    warm_start : bool
        Start each inner multiplier solve from the previous solution.
    """

    weighting: str = "auto"
    jacobian: str = "fd"
    cca_divisor: str = "n_complete"
    rank_policy: str = "error"
    warm_start: bool = False
    tol: float = 1e-8
    max_iter: int = 100
    covariance: bool = True
    propensity_floor: float = 0.01
    profile_max_dim: int = 8

    def __post_init__(self):
        checks = {"weighting": ("auto", "identity", "two-step"), "jacobian": ("fd", "analytic"),
                  "cca_divisor": ("n_complete", "n"), "rank_policy": ("error", "drop")}
        for key, allowed in checks.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")


@dataclass
class EstimateReport:
    method: str
    beta_hat: np.ndarray
    theta_hat: dict = field(default_factory=dict)
    covariance: Optional[np.ndarray] = None
    residual_norm: float = 0.0
    iterations: int = 0
    converged: bool = True
    diagnostics: list = field(default_factory=list)
    parts: Optional[M.SandwichParts] = None
    el_state: Optional[ELState] = None
    n: int = 0

    @property
    def se(self):
        if self.covariance is None:
            return None
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def influence(self):
        """Influence rows of ``beta_hat`` (``cov = mean(IF IF') / n``)."""
        if self.parts is None:
            raise ValueError("report carries no sandwich blocks")
        return self.parts.influence()


@dataclass
class OuterTrace:
    betas: list = field(default_factory=list)
    norms: list = field(default_factory=list)
    secant_steps: int = 0

    @property
    def iterations(self):
        return max(0, len(self.norms) - 1)


# ---------------------------------------------------------------------------
# outer root finder
# ---------------------------------------------------------------------------
def fd_matrix(residual, beta):
    """Central-difference Jacobian of ``residual`` with step ``max(1e-6, 1e-6|beta|)``."""
    beta = np.asarray(beta, dtype=float)
    h = fd_step(beta)
    cols = []
    for j in range(beta.size):
        e = np.zeros_like(beta)
        e[j] = h[j]
        cols.append((np.asarray(residual(beta + e)) - np.asarray(residual(beta - e))) / (2 * h[j]))
    return np.column_stack(cols)


def _eval(residual, beta):
    try:
        R = np.atleast_1d(np.asarray(residual(beta), dtype=float))
    except EdrError:
        return None
    return R if np.all(np.isfinite(R)) else None


def solve_outer(residual: Callable, jac: Optional[Callable], beta0, tol=1e-8, max_iter=100,
                max_halvings=30):
    """Damped Newton for ``residual(beta) = 0``.

    ``jac`` may be ``None`` (central differences).  Steps are halved until
    the residual norm decreases; trial points where ``residual`` raises an
    :class:`EdrError` count as failures.  When the Jacobian is singular a
    Broyden secant matrix replaces it.  Returns ``(beta_hat, trace)``.
    """
    beta = np.atleast_1d(np.asarray(beta0, dtype=float)).copy()
    p = beta.size
    jac = jac if jac is not None else (lambda b: fd_matrix(residual, b))
    R = _eval(residual, beta)
    if R is None:
        raise NonConvergenceError("residual cannot be evaluated at the starting point")
    trace = OuterTrace([beta.copy()], [float(np.linalg.norm(R))])
    B = None
    for it in range(max_iter):
        nrm = float(np.linalg.norm(R))
        if nrm <= tol:
            return beta, trace
        step = None
        try:
            J = np.atleast_2d(np.asarray(jac(beta), dtype=float)).reshape(R.size, p)
            if np.all(np.isfinite(J)) and np.linalg.cond(J) < 1e13:
                step = -np.linalg.solve(J, R)
                B = J
        except (EdrError, np.linalg.LinAlgError):
            J = None
        if step is None:
            trace.secant_steps += 1
            if B is None:
                B = np.eye(p)
            try:
                step = -np.linalg.solve(B, R)
            except np.linalg.LinAlgError:
                B = np.eye(p)
                step = -R
        t = 1.0
        last = None
        for _ in range(max_halvings):
            cand = beta + t * step
            Rc = _eval(residual, cand)
            if Rc is not None:
                last = (cand, Rc)
                if np.linalg.norm(Rc) <= (1.0 - 1e-4 * t) * nrm:
                    break
            t *= 0.5
        if last is None:
            raise NonConvergenceError(f"outer solve stalled at iteration {it}: no evaluable trial point", trace)
        cand, Rc = last
        dx = cand - beta
        dR = Rc - R
        if dx @ dx > 0:
            B = B + np.outer(dR - B @ dx, dx) / (dx @ dx)
        beta, R = cand, Rc
        trace.betas.append(beta.copy())
        trace.norms.append(float(np.linalg.norm(R)))
    if np.linalg.norm(R) <= tol:
        return beta, trace
    raise NonConvergenceError(
        f"outer solve did not converge in {max_iter} iterations (|residual| = {np.linalg.norm(R):.2e})", trace)


def _gmm(mean_fn, jac_fn, parts_fn, beta0, r, p, opts: EstimatorOptions, W_stage1=None):
    """Solve ``W mean_fn(beta) = 0`` with identity or two-step weighting.

    Returns ``(beta, iterations, residual_norm, weighting_used)``.
    """
    weighting = opts.weighting
    if weighting == "auto":
        weighting = "identity" if r == p else "two-step"
    beta0 = np.atleast_1d(np.asarray(beta0, dtype=float))
    if r == p:
        W = np.eye(p) if W_stage1 is None else W_stage1
    else:
        W = jac_fn(beta0).T if W_stage1 is None else W_stage1
    res = lambda b: W @ mean_fn(b)
    jw = None if jac_fn is None else (lambda b: W @ jac_fn(b))
    beta, tr = solve_outer(res, jw, beta0, opts.tol, opts.max_iter)
    its = tr.iterations
    if weighting == "two-step":
        W = parts_fn(beta).weight()
        res = lambda b: W @ mean_fn(b)
        jw = None if jac_fn is None else (lambda b: W @ jac_fn(b))
        beta, tr = solve_outer(res, jw, beta, opts.tol, opts.max_iter)
        its += tr.iterations
    return beta, its, tr.norms[-1], weighting


def _finish(report: EstimateReport, opts: EstimatorOptions, parts: M.SandwichParts):
    report.parts = parts
    if opts.covariance:
        try:
            report.covariance = parts.sigma() / parts.n
        except SingularMatrixError as exc:
            report.diagnostics.append(Diagnostic("singular-matrix", str(exc)))
        report.diagnostics.extend(parts.diagnostics)
    return report


# ---------------------------------------------------------------------------
# full data and complete cases
# ---------------------------------------------------------------------------
def _default_start(ef: EstimatingFunction, beta0):
    return np.zeros(ef.p) if beta0 is None else np.atleast_1d(np.asarray(beta0, dtype=float))


def _el_one_sample(P: M.Problem, beta0, opts):
    """Profile EL estimator: root of the profile log-EL gradient in beta."""
    def lam_at(b):
        st = solve_lambda(P.s(b), rank_policy=opts.rank_policy)
        if not st.converged:
            raise InfeasibleError("EL inner problem infeasible at trial beta")
        return st

    def grad(b):
        st = lam_at(b)
        e = 1.0 / (1.0 + st.g_matrix @ st.lam)
        return np.einsum("n,nrp,r->p", e, P.js(b), st.lam) / P.n

    beta, tr = solve_outer(grad, None, beta0, opts.tol, opts.max_iter)
    return beta, tr, lam_at(beta)


def estimate_all(ds: Dataset, ef: EstimatingFunction, options: EstimatorOptions = None, beta0=None,
                 method="ALL") -> EstimateReport:
    """Full-data estimator: root of the mean for ``r = p``, one-sample EL for ``r > p``."""
    opts = options or EstimatorOptions()
    if np.any(ds.delta == 0):
        raise DataError(f"{method} estimator needs fully observed data; {int(np.sum(ds.delta == 0))} row(s) have delta = 0")
    P = M.Problem(ds, ef)
    b0 = _default_start(ef, beta0)
    if ef.r == ef.p:
        beta, tr = solve_outer(lambda b: P.s(b).mean(axis=0), lambda b: P.js(b).mean(axis=0), b0,
                               opts.tol, opts.max_iter)
        rep = EstimateReport(method, beta, {}, None, tr.norms[-1], tr.iterations, True, [], n=ds.n)
    else:
        start, *_ = _gmm(lambda b: P.s(b).mean(axis=0), lambda b: P.js(b).mean(axis=0), None, b0,
                         ef.r, ef.p, replace(opts, weighting="identity"))
        beta, tr, st = _el_one_sample(P, start, opts)
        rep = EstimateReport(method, beta, {"lambda": st.lam}, None, tr.norms[-1], tr.iterations, True, [],
                             el_state=st, n=ds.n)
    return _finish(rep, opts, M.plain_parts(P, beta, method))


def estimate_cca(ds: Dataset, ef: EstimatingFunction, options: EstimatorOptions = None, beta0=None) -> EstimateReport:
    """Complete-case analysis."""
    opts = options or EstimatorOptions()
    if opts.cca_divisor == "n":
        if not (ef.mean_response and ef.r == 1):
            raise ConfigError("cca_divisor='n' is only defined for a scalar mean response")
        y = np.zeros(ds.n)
        y[ds.complete_idx] = ds.y_complete()[:, 0]
        beta = np.array([y.sum() / ds.n])
        psi = (y - beta[0] * ds.delta)[:, None]
        parts = M.SandwichParts("CCA", psi, np.array([[-ds.delta.mean()]]), np.zeros((ds.n, 0)),
                                np.zeros((1, 0)), np.zeros((0, 0)), np.zeros((0, 1)))
        rep = EstimateReport("CCA", beta, {}, None, 0.0, 0, True, [], n=ds.n)
        return _finish(rep, opts, parts)
    return estimate_all(complete_cases(ds), ef, opts, beta0, method="CCA")


def _cc_start(ds, ef, beta0=None):
    """Cheap consistent-under-MCAR start: complete-case root with fixed weighting."""
    cc = complete_cases(ds)
    P = M.Problem(cc, ef)
    b0 = _default_start(ef, beta0)
    try:
        beta, *_ = _gmm(lambda b: P.s(b).mean(axis=0), lambda b: P.js(b).mean(axis=0), None, b0,
                        ef.r, ef.p, EstimatorOptions(weighting="identity"))
    except EdrError:
        return b0
    return beta


# ---------------------------------------------------------------------------
# nuisances
# ---------------------------------------------------------------------------
def fit_nuisances(ds: Dataset, pm: PropensityModel, rm: RegressionModel = None, ef=None, opts=None):
    """Fit (or take as given) gamma and alpha; returns ``(gamma, alpha, diagnostics)``."""
    opts = opts or EstimatorOptions()
    diags = []
    if pm.known is not None:
        gamma = np.zeros(0)
        d = c3_diagnostic(propensity_scores(pm, None, ds), opts.propensity_floor)
        if d:
            diags.append(d)
    elif pm.gamma is not None:
        gamma = np.asarray(pm.gamma, dtype=float)
    else:
        fit = fit_propensity(ds, pm, floor=opts.propensity_floor)
        gamma = fit.gamma_hat
        diags.extend(fit.diagnostics)
    alpha = None
    if rm is not None:
        if rm.alpha is not None:
            alpha = np.asarray(rm.alpha, dtype=float)
        elif rm.alpha_dim == 0:
            alpha = np.zeros(0)
        else:
            alpha = fit_regression(ds, rm, ef).alpha_hat
    return gamma, alpha, diags


# ---------------------------------------------------------------------------
# HT and RRZ
# ---------------------------------------------------------------------------
def estimate_ht(ds: Dataset, ef: EstimatingFunction, pm: PropensityModel, options: EstimatorOptions = None,
                beta0=None) -> EstimateReport:
    """Inverse-probability-weighted estimator solving ``mean delta s / pi = 0``."""
    opts = options or EstimatorOptions()
    gamma, _, diags = fit_nuisances(ds, pm, None, ef, opts)
    P = M.Problem(ds, ef, pm)
    b0 = _cc_start(ds, ef, beta0)
    beta, its, rn, _ = _gmm(lambda b: M.ht_mean(P, b, gamma), lambda b: M.ht_jac(P, b, gamma),
                            lambda b: M.ht_parts(P, b, gamma), b0, ef.r, ef.p, opts)
    rep = EstimateReport("HT", beta, {"gamma": gamma}, None, rn, its, True, diags, n=ds.n)
    return _finish(rep, opts, M.ht_parts(P, beta, gamma))


def estimate_rrz(ds: Dataset, ef: EstimatingFunction, pm: PropensityModel, rm: RegressionModel,
                 options: EstimatorOptions = None, beta0=None) -> EstimateReport:
    """Augmented IPW estimator with augmentation ``-(delta - pi)/pi * u``."""
    opts = options or EstimatorOptions()
    gamma, alpha, diags = fit_nuisances(ds, pm, rm, ef, opts)
    P = M.Problem(ds, ef, pm, rm)
    b0 = _cc_start(ds, ef, beta0)
    beta, its, rn, _ = _gmm(lambda b: M.rrz_mean(P, b, gamma, alpha), lambda b: M.rrz_jac(P, b, gamma, alpha),
                            lambda b: M.rrz_parts(P, b, gamma, alpha), b0, ef.r, ef.p, opts)
    rep = EstimateReport("RRZ", beta, {"gamma": gamma, "alpha": alpha}, None, rn, its, True, diags, n=ds.n)
    return _finish(rep, opts, M.rrz_parts(P, beta, gamma, alpha))


# ---------------------------------------------------------------------------
# EDR
# ---------------------------------------------------------------------------
class _Inner:
    """Multiplier solves along the outer iteration, with optional warm start."""

    def __init__(self, P, gamma, alpha, opts):
        self.P, self.gamma, self.alpha, self.opts = P, gamma, alpha, opts
        self.last = None
        self.solves = 0

    def __call__(self, beta) -> ELState:
        G = self.P.g(beta, self.gamma, self.alpha)
        lam0 = self.last if (self.opts.warm_start and self.last is not None) else None
        st = solve_lambda(G, rank_policy=self.opts.rank_policy, lam0=lam0)
        self.solves += 1
        if not st.converged:
            raise InfeasibleError("EL inner problem has no interior solution at this beta")
        self.last = st.lam
        return st


def estimate_edr(ds: Dataset, ef: EstimatingFunction, pm: PropensityModel, rm: RegressionModel,
                 options: EstimatorOptions = None, beta0=None) -> EstimateReport:
    """Empirical-likelihood weighted, doubly robust estimator.

    For each trial ``beta`` the multiplier is re-solved on the constraint rows
    ``g(t_i, beta, gamma_hat, alpha_hat)`` and the outer residual is
    ``W mean phi3``.  Inner failures at a trial point make the outer line
    search halve its step.
    """
    opts = options or EstimatorOptions()
    gamma, alpha, diags = fit_nuisances(ds, pm, rm, ef, opts)
    P = M.Problem(ds, ef, pm, rm)
    inner = _Inner(P, gamma, alpha, opts)
    b0 = _cc_start(ds, ef, beta0)

    def mean_fn(b):
        return M.edr_mean(P, b, gamma, alpha, inner(b).lam)

    def total_jac(b):
        st = inner(b)
        return M.edr_total_jac(P, b, gamma, alpha, st.lam, kept=st.kept)

    def parts_fn(b):
        st = inner(b)
        return M.edr_parts(P, b, gamma, alpha, st.lam, kept=st.kept)

    weighting = opts.weighting if opts.weighting != "auto" else ("identity" if ef.r == ef.p else "two-step")
    W1 = None
    if ef.r > ef.p:
        W1 = total_jac(b0).T
    jac = total_jac if opts.jacobian == "analytic" else None
    beta, its, rn, _ = _gmm(mean_fn, jac, parts_fn, b0, ef.r, ef.p, replace(opts, weighting=weighting), W1)
    st = inner(beta)
    rep = EstimateReport("EDR", beta, {"gamma": gamma, "alpha": alpha, "lambda": st.lam}, None, rn, its, True,
                         diags, el_state=st, n=ds.n)
    return _finish(rep, opts, M.edr_parts(P, beta, gamma, alpha, st.lam, kept=st.kept))


def edr_mean_response(ds: Dataset, pm: PropensityModel, rm: RegressionModel,
                      options: EstimatorOptions = None) -> EstimateReport:
    """Closed-form EDR estimate of a scalar mean.

    With ``xi = (m(x, alpha), 1)`` the EL weights do not involve ``beta`` and

        beta_hat = sum_i p_i delta_i y_i / pi_i - n^{-1} sum_i (n p_i - 1) m(x_i, alpha).

    ``rm`` must expose ``mean(x, alpha)`` (e.g. :meth:`RegressionModel.linear_mean`).
    """
    opts = options or EstimatorOptions()
    if ds.dim_y != 1:
        raise DataError("edr_mean_response needs a scalar response")
    ef = mean_response_function(1)
    gamma, alpha, diags = fit_nuisances(ds, pm, rm, ef, opts)
    P = M.Problem(ds, ef, pm, rm)
    pi, r_, _ = P.prop(gamma)
    mfit = rm.mean(ds.x, alpha)[:, 0]
    w = (P.delta - pi) / pi
    G = np.column_stack([w * mfit, w, P.U1(pi)[0]])
    st = solve_lambda(G, rank_policy=opts.rank_policy)
    if not st.converged:
        raise InfeasibleError("EL inner problem has no interior solution")
    p_ = st.weights
    y = np.zeros(ds.n)
    y[ds.complete_idx] = ds.y_complete()[:, 0]
    beta = np.array([np.sum(p_ * r_ * y) - np.sum((ds.n * p_ - 1.0) * mfit) / ds.n])
    lam = _reparam_lambda(st.lam, beta)
    rep = EstimateReport("EDR", beta, {"gamma": gamma, "alpha": alpha, "lambda": lam}, None,
                         float(np.linalg.norm(M.edr_mean(P, beta, gamma, alpha, lam))),
                         st.iterations, True, diags, el_state=st, n=ds.n)
    if opts.covariance:
        _finish(rep, opts, M.edr_parts(P, beta, gamma, alpha, lam, kept=st.kept))
    return rep


def _reparam_lambda(lam_m, beta):
    """Multiplier for ``xi = (m - beta, 1)`` given the one for ``xi = (m, 1)``."""
    lam = np.array(lam_m, dtype=float)
    lam[1] = lam_m[1] + beta[0] * lam_m[0]
    return lam


# ---------------------------------------------------------------------------
# profile EL (experimental)
# ---------------------------------------------------------------------------
def _psi_rows(P: M.Problem, beta, gamma, alpha):
    _, r_, _ = P.prop(gamma)
    phi1 = r_[:, None] * P.s(beta)
    return np.column_stack([phi1, P.g(beta, gamma, alpha)])


def profile_el_loglik(ds: Dataset, ef: EstimatingFunction, pm: PropensityModel, rm: RegressionModel,
                      beta, gamma, alpha=None, return_state=False, rank_policy="error"):
    """Profile log-EL ``-sum log(1 + mu' psi_i) - n log n`` with ``psi = (phi1, g)``.

    ``alpha`` defaults to the complete-case fit.  An infeasible inner problem
    returns ``-inf`` (and ``converged=False`` in the state), as does a
    rank-deficient ``psi`` under ``rank_policy="error"``.
    """
    if alpha is None:
        alpha = rm.alpha if rm.alpha is not None else fit_regression(ds, rm, ef).alpha_hat
    P = M.Problem(ds, ef, pm, rm)
    return _profile(P, np.atleast_1d(beta), np.atleast_1d(gamma), alpha, return_state, rank_policy)


def _profile(P, beta, gamma, alpha, return_state=False, rank_policy="error"):
    try:
        st = solve_lambda(_psi_rows(P, beta, gamma, alpha), rank_policy=rank_policy)
    except (EdrError, ValueError):
        return (-np.inf, None) if return_state else -np.inf
    val = st.log_el if st.converged else -np.inf
    return (val, st) if return_state else val


def estimate_el_profile(ds: Dataset, ef: EstimatingFunction, pm: PropensityModel, rm: RegressionModel,
                        options: EstimatorOptions = None, start: EstimateReport = None) -> EstimateReport:
    """Experimental: maximise the profile log-EL over ``(beta, gamma)`` by Nelder-Mead.

    Starts from the EDR estimate (computed unless ``start`` is given) and
    never returns a point with a lower objective than the start.
    """
    opts = options or EstimatorOptions()
    if pm.known is not None:
        raise ConfigError("profile EL needs an estimated propensity model")
    P = M.Problem(ds, ef, pm, rm)
    if ef.p + P.q > opts.profile_max_dim:
        raise ConfigError(f"profile EL refused: p + q = {ef.p + P.q} exceeds {opts.profile_max_dim}")
    if start is None:
        start = estimate_edr(ds, ef, pm, rm, replace(opts, covariance=False))
    gamma0 = start.theta_hat["gamma"]
    alpha = start.theta_hat["alpha"]
    x0 = np.concatenate([start.beta_hat, gamma0])
    p = ef.p

    def negll(v):
        val = _profile(P, v[:p], v[p:], alpha, rank_policy=opts.rank_policy)
        return 1e300 if not np.isfinite(val) else -val

    f0 = negll(x0)
    res = minimize(negll, x0, method="Nelder-Mead",
                   options={"fatol": 1e-6, "xatol": 1e-6, "maxiter": 400 * x0.size, "adaptive": x0.size > 4})
    diags = [Diagnostic("experimental", "profile EL estimator is experimental")]
    x, f = (res.x, res.fun) if res.fun <= f0 else (x0, f0)
    converged = bool(res.success) and np.isfinite(f) and f < 1e300
    if not converged:
        diags.append(Diagnostic("non-convergence", f"Nelder-Mead: {res.message}"))
    theta = {"gamma": x[p:].copy(), "alpha": alpha, "log_el": float(-f), "log_el_start": float(-f0)}
    return EstimateReport("EL-profile", x[:p].copy(), theta, None, 0.0, int(res.nit), converged, diags, n=ds.n)
