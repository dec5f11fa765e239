"""Empirical-likelihood inner problem: constraint vectors, multiplier, weights."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.linalg import qr

from . import _kernels
from .data import Observation, PropensityModel, RegressionModel
from .errors import InfeasibleError, NonConvergenceError, RankDeficientError
from .nuisance import propensity_scores, u1_rows

__all__ = [
    "ELState",
    "build_g",
    "g_rows",
    "log_star",
    "solve_lambda",
    "el_weights",
    "LAMBDA_TOL",
    "LAMBDA_MAXIT",
]

LAMBDA_TOL = 1e-9
LAMBDA_MAXIT = 200
RANK_TOL = 1e-10
# |1 - sum p| = |lam' mean(p g)| has a rounding floor that grows with |lam|
SUM_TOL = 1e-8


@dataclass(frozen=True)
class ELState:
    """Solved inner EL problem.

    ``kept`` lists the columns of the original ``g`` that took part in the
    solve; it differs from ``range(m)`` only under the ``"drop"`` rank policy.
    """

    g_matrix: np.ndarray
    lam: np.ndarray
    weights: np.ndarray
    log_el: float
    converged: bool
    min_denominator: float
    iterations: int = 0
    trace: np.ndarray = None
    kept: tuple = ()
    dropped: tuple = ()
    status: int = 0

    @property
    def lambda_(self):
        return self.lam


def log_star(v, n):
    """Pseudo-logarithm with threshold ``1/n``; returns ``(value, d1, d2)``.

    Equal to ``log v`` for ``v >= 1/n`` and to the quadratic that matches the
    value and first two derivatives at ``1/n`` below it.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    f, d1, d2 = _kernels.log_star(v, 1.0 / n)
    if np.ndim(v) == 0:
        return float(f), float(d1), float(d2)
    return f, d1, d2


def g_rows(x, delta, pi, xi, F_prop):
    """Stack ``g_i = (w_i xi_i, U1_i)`` with ``w = (delta - pi) / pi``; shape ``(n, m)``."""
    w = (delta - pi) / pi
    return np.column_stack([w[:, None] * xi, u1_rows(F_prop, delta, pi)])


def build_g(t: Observation, beta, gamma, alpha, pm: PropensityModel, rm: RegressionModel) -> np.ndarray:
    """Constraint vector of a single observation."""
    x = np.atleast_2d(np.asarray(t.x, dtype=float))
    pi = propensity_scores(pm, gamma, x)
    xi = rm.xi(x, beta, alpha)
    delta = np.array([float(t.delta)])
    return g_rows(x, delta, pi, xi, pm.features(x))[0]


def _rank_columns(G):
    """Indices of a maximal independent column set via pivoted QR."""
    if G.shape[1] == 0:
        return np.arange(0), np.arange(0)
    scale = np.linalg.norm(G)
    if scale == 0.0:
        return np.arange(0), np.arange(G.shape[1])
    _, R, piv = qr(G, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOL * scale))
    return np.sort(piv[:rank]), np.sort(piv[rank:])


def _grad_norm(G, lam):
    n = G.shape[0]
    return float(np.linalg.norm(G.T @ _kernels.log_star(1.0 + G @ lam, 1.0 / n)[1]) / n)


def el_weights(lam, g_matrix) -> np.ndarray:
    """``p_i = 1 / (n (1 + lam' g_i))``."""
    G = np.asarray(g_matrix, dtype=float)
    D = 1.0 + G @ np.asarray(lam, dtype=float)
    if np.any(D <= 0.0):
        raise InfeasibleError(f"nonpositive EL denominator at {int(np.sum(D <= 0))} row(s)")
    return 1.0 / (G.shape[0] * D)


def solve_lambda(g_matrix, tol=LAMBDA_TOL, maxit=LAMBDA_MAXIT, rank_policy="error",
                 raise_on_failure=False, lam0=None) -> ELState:
    """Find the multiplier maximising ``sum log*(1 + lam' g_i)``.

    Parameters
    ----------
    g_matrix : (n, m) array
    rank_policy : {"error", "drop"}
        Rank-deficient constraint columns raise :class:`RankDeficientError`
        naming them, or are dropped (their multiplier is then 0).
    raise_on_failure : bool
        Raise instead of returning ``converged=False``.
    lam0 : (m,) array, optional
        Warm start; the default starts from zero.

    Notes
    -----
    ``converged`` requires a small gradient *and* an interior optimum: weights
    summing to one and every ``1 + lam' g_i >= 1/n``.  When the zero vector
    lies outside the convex hull of the rows the surrogate objective keeps
    increasing, the gradient can still shrink, and the second check is what
    flags the problem.
    """
    G = np.asarray(g_matrix, dtype=float)
    if G.ndim != 2:
        raise ValueError("g_matrix must be 2-d")
    n, m = G.shape
    if not np.all(np.isfinite(G)):
        raise ValueError("g_matrix has non-finite entries")
    if m > n:
        raise RankDeficientError(f"more constraints ({m}) than rows ({n})", tuple(range(n, m)))
    kept, dropped = _rank_columns(G)
    if dropped.size:
        if rank_policy == "error":
            raise RankDeficientError(
                f"constraint columns {dropped.tolist()} are linearly dependent on the others", tuple(dropped.tolist()))
        if rank_policy != "drop":
            raise ValueError(f"unknown rank_policy {rank_policy!r}")
    Gk = G[:, kept]
    # EL is invariant under g -> g R^{-1}; with G = QR the Newton system in
    # Gt = sqrt(n) Q is well conditioned even when the columns of g nearly
    # coincide, and lam = sqrt(n) R^{-1} lam_t.
    root_n = np.sqrt(n)
    if Gk.shape[1]:
        Q, R = np.linalg.qr(Gk)
        sgn = np.where(np.diag(R) < 0, -1.0, 1.0)
        Q, R = Q * sgn, R * sgn[:, None]
    else:
        Q, R = Gk, np.zeros((0, 0))
    Gt = root_n * Q
    scale = max(1.0, float(np.linalg.norm(R, 2)) / root_n) if R.size else 1.0
    tol_t = tol / scale
    start = None if lam0 is None else R @ np.asarray(lam0, dtype=float)[kept] / root_n
    lam_t, obj, it, status, trace = _kernels.el_newton(Gt, tol_t, maxit, start)
    dmin = float((1.0 + Gt @ lam_t).min())
    if status == _kernels.CONVERGED and dmin >= 1.0 / n and it < maxit:
        # 1 - sum(p) = lam' grad / n, so a large multiplier can need a polish
        p = 1.0 / (n * (1.0 + Gt @ lam_t))
        if abs(1.0 - p.sum()) > SUM_TOL:
            lam_p, obj_p, extra, _, tr2 = _kernels.el_newton(Gt, tol_t * 1e-3, 20, lam_t)
            if _grad_norm(Gt, lam_p) <= tol_t:
                lam_t, obj = lam_p, obj_p
                it += extra
                trace = np.concatenate([trace, tr2[1:]])
    lam_k = root_n * sla.solve_triangular(R, lam_t) if R.size else lam_t
    lam = np.zeros(m)
    lam[kept] = lam_k
    D = 1.0 + G @ lam
    dmin = float(D.min()) if n else 1.0
    with np.errstate(divide="ignore"):
        p = 1.0 / (n * D)
    converged = (status == _kernels.CONVERGED and dmin >= 1.0 / n - 1e-12
                 and abs(1.0 - p.sum()) <= SUM_TOL)
    if raise_on_failure and not converged:
        if dmin < 1.0 / n - 1e-12 or status == _kernels.DIVERGED:
            raise InfeasibleError("EL problem infeasible: zero is not inside the convex hull of g")
        raise NonConvergenceError(f"EL multiplier did not converge (status {status}, {it} iterations)", trace)
    return ELState(G, lam, p, float(-np.sum(np.log(n * D)) if dmin > 0 else -np.inf), bool(converged), dmin,
                   int(it), trace, tuple(kept.tolist()), tuple(dropped.tolist()), int(status))
