"""Nuisance fits: logistic propensity by binomial ML, working regression on complete cases."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import Dataset, Diagnostic, Observation, PropensityModel, RegressionModel, fd_jacobian
from .errors import DataError, NoVariationError, NonConvergenceError, RankDeficientError, SeparationError

__all__ = [
    "PropensityFit",
    "RegressionFit",
    "PI_CLAMP",
    "fit_propensity",
    "propensity_scores",
    "c3_diagnostic",
    "fit_regression",
    "score_U1",
    "jac_U1",
    "score_U2",
    "jac_U2",
    "u1_rows",
    "du1_rows",
    "u2_rows",
    "du2_rows",
]

PI_CLAMP = 1e-12
SCORE_TOL = 1e-8


@dataclass(frozen=True)
class PropensityFit:
    gamma_hat: np.ndarray
    iterations: int
    converged: bool
    score_norm: float
    diagnostics: list = field(default_factory=list)


@dataclass(frozen=True)
class RegressionFit:
    alpha_hat: np.ndarray
    residual_stat: float
    converged: bool
    iterations: int = 0


def _logistic(eta):
    return np.clip(expit(eta), PI_CLAMP, 1.0 - PI_CLAMP)


def propensity_scores(pm: PropensityModel, gamma, ds_or_x) -> np.ndarray:
    """Fitted response probabilities, clamped to ``[1e-12, 1 - 1e-12]``."""
    x = ds_or_x.x if isinstance(ds_or_x, Dataset) else np.asarray(ds_or_x, dtype=float)
    if pm.known is not None:
        return np.clip(np.asarray(pm.known(x), dtype=float).reshape(-1), PI_CLAMP, 1.0 - PI_CLAMP)
    gamma = np.asarray(gamma, dtype=float)
    if not np.all(np.isfinite(gamma)):
        raise ValueError("gamma must be finite")
    return _logistic(pm.features(x) @ gamma)


def c3_diagnostic(pi, floor=0.01):
    """Flag rows whose fitted probability falls below ``floor`` (positivity condition)."""
    rows = np.flatnonzero(np.asarray(pi) < floor)
    if rows.size == 0:
        return None
    return Diagnostic("C3", f"{rows.size} row(s) with fitted propensity below {floor}: "
                      "probabilities are not bounded away from zero", tuple(rows.tolist()))


def _loglik(F, delta, gamma):
    eta = F @ gamma
    return float(np.sum(delta * eta - np.logaddexp(0.0, eta)))


def fit_propensity(ds: Dataset, pm: PropensityModel, tol=SCORE_TOL, max_iter=100, floor=0.01) -> PropensityFit:
    """Binomial maximum likelihood for the logistic working model.

    Newton-Raphson with step halving from ``gamma = 0``, run on standardised
    features and mapped back.  Separation is reported when a standardised
    coefficient exceeds 30 in absolute value.
    """
    if pm.known is not None:
        pi = propensity_scores(pm, None, ds)
        diag = [d for d in [c3_diagnostic(pi, floor)] if d]
        return PropensityFit(np.zeros(0), 0, True, 0.0, diag)
    delta = ds.delta.astype(float)
    if delta.min() == delta.max():
        raise NoVariationError("response indicator is constant; the logistic MLE does not exist")
    F = pm.features(ds.x)
    n, q = F.shape
    sd = F.std(axis=0)
    const = sd < 1e-12
    # centre only when an intercept column can absorb the shift
    mu = np.where(const, 0.0, F.mean(axis=0)) if const.any() else np.zeros(q)
    scale = np.where(const, 1.0, np.sqrt(sd**2 + (F.mean(axis=0) - mu) ** 2))
    Fs = (F - mu) / scale
    if np.linalg.matrix_rank(Fs) < q:
        raise RankDeficientError("propensity design is rank deficient")
    # gamma = to_orig @ g maps standardised coefficients back
    to_orig = np.diag(1.0 / scale)
    if const.any():
        to_orig[np.flatnonzero(const)[0]] -= mu / scale
    g = np.zeros(q)
    ll = _loglik(Fs, delta, g)
    converged = False
    for it in range(1, max_iter + 1):
        pi = expit(Fs @ g)
        grad = Fs.T @ (delta - pi)
        H = (Fs * (pi * (1.0 - pi))[:, None]).T @ Fs
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise SeparationError("singular information matrix; quasi-complete separation") from None
        t = 1.0
        for _ in range(40):
            cand = g + t * step
            ll_new = _loglik(Fs, delta, cand)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        g, ll = cand, ll_new
        if np.max(np.abs(g)) > 30.0:
            raise SeparationError(f"standardised coefficient diverged (|gamma| = {np.max(np.abs(g)):.1f} > 30)")
        gamma = to_orig @ g
        score = F.T @ (delta - _logistic(F @ gamma)) / n
        snorm = float(np.linalg.norm(score))
        if snorm <= tol:
            converged = True
            break
    gamma = to_orig @ g
    if not converged:
        raise NonConvergenceError(f"propensity fit did not converge in {max_iter} iterations (|score| = {snorm:.2e})")
    pi = propensity_scores(pm, gamma, ds)
    diag = [d for d in [c3_diagnostic(pi, floor)] if d]
    return PropensityFit(gamma, it, converged, snorm, diag)


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------
def u1_rows(F, delta, pi):
    """Logistic score rows ``(delta - pi) * design``; shape ``(n, q)``."""
    return (delta - pi)[:, None] * F


def du1_rows(F, pi):
    """Row Jacobians ``-pi (1 - pi) design design'``; shape ``(n, q, q)``."""
    return -(pi * (1.0 - pi))[:, None, None] * F[:, :, None] * F[:, None, :]


def _y_full(ds: Dataset):
    """Responses on complete rows; zeros elsewhere (only ever multiplied by delta)."""
    y = np.zeros((ds.n, ds.dim_y))
    y[ds.complete_idx] = ds.y_complete()
    return y


def u2_rows(ds: Dataset, rm: RegressionModel, alpha) -> np.ndarray:
    """Complete-case regression score rows; zero where ``delta = 0``."""
    alpha = np.asarray(alpha, dtype=float)
    out = np.zeros((ds.n, alpha.size))
    idx = ds.complete_idx
    if idx.size == 0:
        return out
    x = ds.x[idx]
    y = ds.y_complete()
    if rm.fit_kind == "least-squares":
        F = rm.features(x)
        A = alpha.reshape(-1, F.shape[1])
        resid = y[:, : A.shape[0]] - F @ A.T
        out[idx] = (resid[:, :, None] * F[:, None, :]).reshape(idx.size, -1)
    elif rm.score is not None:
        out[idx] = np.asarray(rm.score(x, y, alpha), dtype=float).reshape(idx.size, -1)
    else:
        out[idx] = fd_jacobian(lambda a: np.asarray(rm.log_density(x, y, a), dtype=float).reshape(-1, 1), alpha)[:, 0, :]
    return out


def du2_rows(ds: Dataset, rm: RegressionModel, alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    A = alpha.size
    out = np.zeros((ds.n, A, A))
    idx = ds.complete_idx
    if idx.size == 0:
        return out
    if rm.fit_kind == "least-squares":
        F = rm.features(ds.x[idx])
        w = F.shape[1]
        FF = -F[:, :, None] * F[:, None, :]
        for j in range(A // w):
            out[idx, j * w:(j + 1) * w, j * w:(j + 1) * w] = FF
    else:
        full = lambda a: u2_rows(ds, rm, a)[idx]
        out[idx] = fd_jacobian(full, alpha)
    return out


def score_U1(t: Observation, gamma, pm: PropensityModel) -> np.ndarray:
    x = np.atleast_2d(np.asarray(t.x, dtype=float))
    F = pm.features(x)
    pi = propensity_scores(pm, gamma, x)
    return u1_rows(F, np.array([float(t.delta)]), pi)[0]


def jac_U1(t: Observation, gamma, pm: PropensityModel) -> np.ndarray:
    x = np.atleast_2d(np.asarray(t.x, dtype=float))
    return du1_rows(pm.features(x), propensity_scores(pm, gamma, x))[0]


def score_U2(t: Observation, alpha, rm: RegressionModel) -> np.ndarray:
    ds = Dataset.from_rows([t])
    return u2_rows(ds, rm, alpha)[0]


def jac_U2(t: Observation, alpha, rm: RegressionModel) -> np.ndarray:
    ds = Dataset.from_rows([t])
    return du2_rows(ds, rm, alpha)[0]


# ---------------------------------------------------------------------------
# regression fit
# ---------------------------------------------------------------------------
def fit_regression(ds: Dataset, rm: RegressionModel, ef=None, tol=SCORE_TOL, max_iter=100) -> RegressionFit:
    """Fit the working regression on the complete cases.

    Least squares solves the normal equations exactly, one response column
    at a time.  Conditional ML runs Newton on the complete-case score with a
    finite-difference Hessian unless ``rm.score`` is supplied.
    """
    idx = ds.complete_idx
    if idx.size < rm.alpha_dim // max(1, ds.dim_y if rm.fit_kind == "least-squares" else 1):
        raise DataError(f"only {idx.size} complete cases for {rm.alpha_dim} regression parameters")
    if rm.fit_kind == "least-squares":
        F = rm.features(ds.x[idx])
        y = ds.y_complete()
        w = F.shape[1]
        ncol = rm.alpha_dim // w
        if np.linalg.matrix_rank(F) < w:
            raise RankDeficientError("regression design is rank deficient on the complete cases")
        A, *_ = np.linalg.lstsq(F, y[:, :ncol], rcond=None)
        # one refinement step on the normal equations
        R = F.T @ (y[:, :ncol] - F @ A)
        A = A + np.linalg.solve(F.T @ F, R)
        resid = y[:, :ncol] - F @ A
        return RegressionFit(A.T.reshape(-1), float(np.sqrt(np.mean(resid**2))), True, 1)

    n = ds.n
    alpha = np.zeros(rm.alpha_dim) if rm.alpha0 is None else np.asarray(rm.alpha0, dtype=float).copy()
    x, y = ds.x[idx], ds.y_complete()

    def ll(a):
        return float(np.sum(rm.log_density(x, y, a)))

    cur = ll(alpha)
    for it in range(1, max_iter + 1):
        U = u2_rows(ds, rm, alpha).sum(axis=0)
        if np.linalg.norm(U) / n <= tol:
            return RegressionFit(alpha, float(-cur / idx.size), True, it - 1)
        H = du2_rows(ds, rm, alpha).sum(axis=0)
        H = 0.5 * (H + H.T)
        try:
            step = np.linalg.solve(H, -U)
        except np.linalg.LinAlgError:
            raise RankDeficientError("singular conditional-likelihood Hessian") from None
        t = 1.0
        for _ in range(40):
            cand = alpha + t * step
            new = ll(cand)
            if np.isfinite(new) and new >= cur - 1e-12 * abs(cur):
                break
            t *= 0.5
        alpha, cur = cand, new
    U = u2_rows(ds, rm, alpha).sum(axis=0)
    if np.linalg.norm(U) / n <= tol:
        return RegressionFit(alpha, float(-cur / idx.size), True, max_iter)
    raise NonConvergenceError(f"conditional-likelihood fit did not converge in {max_iter} iterations")
