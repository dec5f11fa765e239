"""Hot numeric kernels: pseudo-log and the damped Newton solve for the EL multiplier.

Each kernel has a numba implementation (explicit loops) and a numpy
implementation (vectorised).  Both return identical quantities; the module
level names ``log_star`` and ``el_newton`` dispatch on :data:`BACKEND`.

Status codes returned by the Newton kernels:

    0  gradient below tolerance
    1  iteration limit reached
    2  step halving could not increase the objective (up to rounding slack),
       or the Newton system became singular
    3  multiplier diverged (norm above 1e12)
"""
import numpy as np

from ._backend import BACKEND, HAVE_NUMBA, njit

__all__ = [
    "log_star",
    "el_newton",
    "log_star_numpy",
    "el_newton_numpy",
    "log_star_numba",
    "el_newton_numba",
    "BACKEND",
]

CONVERGED, MAXITER, STALLED, DIVERGED = 0, 1, 2, 3
_MAX_HALVINGS = 60
_LAMBDA_CAP = 1e12
# objective differences below this (relative) are rounding noise near the optimum
_SLACK = 1e-13


# --------------------------------------------------------------------------
# numpy path
# --------------------------------------------------------------------------
def log_star_numpy(v, eps):
    """Pseudo-log with C2 quadratic extension below ``eps``; returns (f, f', f'')."""
    v = np.asarray(v, dtype=float)
    below = v < eps
    safe = np.where(below, 1.0, v)
    f = np.where(below, np.log(eps) - 1.5 + 2.0 * v / eps - 0.5 * (v / eps) ** 2, np.log(safe))
    d1 = np.where(below, 2.0 / eps - v / eps**2, 1.0 / safe)
    d2 = np.where(below, -1.0 / eps**2, -1.0 / safe**2)
    return f, d1, d2


def el_newton_numpy(G, tol, maxit, lam0=None):
    n, m = G.shape
    eps = 1.0 / n
    lam = np.zeros(m) if lam0 is None else np.array(lam0, dtype=float)
    trace = np.zeros(maxit + 1)
    obj = float(log_star_numpy(1.0 + G @ lam, eps)[0].sum())
    trace[0] = obj
    status = MAXITER
    it = 0
    while it < maxit:
        _, l1, l2 = log_star_numpy(1.0 + G @ lam, eps)
        grad = G.T @ l1
        if np.sqrt(grad @ grad) / n <= tol:
            status = CONVERGED
            break
        H = (G * (-l2)[:, None]).T @ G
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            status = STALLED
            break
        t = 1.0
        accepted = False
        for _ in range(_MAX_HALVINGS):
            cand = lam + t * step
            f_new = log_star_numpy(1.0 + G @ cand, eps)[0].sum()
            if f_new >= obj - _SLACK * (1.0 + abs(obj)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            status = STALLED
            break
        lam = cand
        obj = f_new
        it += 1
        trace[it] = obj
        if np.sqrt(lam @ lam) > _LAMBDA_CAP:
            status = DIVERGED
            break
    if it == maxit and status == MAXITER:
        grad = G.T @ log_star_numpy(1.0 + G @ lam, eps)[1]
        if np.sqrt(grad @ grad) / n <= tol:
            status = CONVERGED
    return lam, obj, it, status, trace[: it + 1].copy()


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------
@njit(cache=True)
def _log_star_scalar(v, eps):
    if v < eps:
        r = v / eps
        return np.log(eps) - 1.5 + 2.0 * r - 0.5 * r * r, 2.0 / eps - v / (eps * eps), -1.0 / (eps * eps)
    return np.log(v), 1.0 / v, -1.0 / (v * v)


@njit(cache=True)
def _log_star_nb(v, eps):
    n = v.shape[0]
    f = np.empty(n)
    d1 = np.empty(n)
    d2 = np.empty(n)
    for i in range(n):
        f[i], d1[i], d2[i] = _log_star_scalar(v[i], eps)
    return f, d1, d2


@njit(cache=True)
def _objective_nb(G, lam, eps):
    n, m = G.shape
    total = 0.0
    for i in range(n):
        d = 1.0
        for j in range(m):
            d += G[i, j] * lam[j]
        total += _log_star_scalar(d, eps)[0]
    return total


@njit(cache=True)
def _el_newton_nb(G, tol, maxit, lam0):
    n, m = G.shape
    eps = 1.0 / n
    lam = lam0.copy()
    cand = np.zeros(m)
    grad = np.zeros(m)
    H = np.zeros((m, m))
    trace = np.zeros(maxit + 1)
    obj = _objective_nb(G, lam, eps)
    trace[0] = obj
    status = MAXITER
    it = 0
    f_new = 0.0
    while it < maxit:
        grad[:] = 0.0
        H[:, :] = 0.0
        for i in range(n):
            d = 1.0
            for j in range(m):
                d += G[i, j] * lam[j]
            _, l1, l2 = _log_star_scalar(d, eps)
            for j in range(m):
                gij = G[i, j]
                grad[j] += l1 * gij
                for k in range(j + 1):
                    H[j, k] -= l2 * gij * G[i, k]
        gn = 0.0
        for j in range(m):
            gn += grad[j] * grad[j]
        if np.sqrt(gn) / n <= tol:
            status = CONVERGED
            break
        for j in range(m):
            for k in range(j):
                H[k, j] = H[j, k]
        step = np.linalg.solve(H, grad)
        t = 1.0
        accepted = False
        for _ in range(_MAX_HALVINGS):
            for j in range(m):
                cand[j] = lam[j] + t * step[j]
            f_new = _objective_nb(G, cand, eps)
            if f_new >= obj - _SLACK * (1.0 + abs(obj)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            status = STALLED
            break
        lam[:] = cand
        obj = f_new
        it += 1
        trace[it] = obj
        ln = 0.0
        for j in range(m):
            ln += lam[j] * lam[j]
        if np.sqrt(ln) > _LAMBDA_CAP:
            status = DIVERGED
            break
    if it == maxit and status == MAXITER:
        grad[:] = 0.0
        for i in range(n):
            d = 1.0
            for j in range(m):
                d += G[i, j] * lam[j]
            l1 = _log_star_scalar(d, eps)[1]
            for j in range(m):
                grad[j] += l1 * G[i, j]
        gn = 0.0
        for j in range(m):
            gn += grad[j] * grad[j]
        if np.sqrt(gn) / n <= tol:
            status = CONVERGED
    return lam, obj, it, status, trace[: it + 1].copy()


def log_star_numba(v, eps):
    return _log_star_nb(np.ascontiguousarray(np.atleast_1d(np.asarray(v, dtype=float))), float(eps))


def el_newton_numba(G, tol, maxit, lam0=None):
    G = np.ascontiguousarray(G, dtype=np.float64)
    lam0 = np.zeros(G.shape[1]) if lam0 is None else np.ascontiguousarray(lam0, dtype=np.float64)
    try:
        return _el_newton_nb(G, float(tol), int(maxit), lam0)
    except np.linalg.LinAlgError:
        # singular Hessian: the iterate ran off towards the hull boundary
        obj = float(_objective_nb(G, lam0, 1.0 / G.shape[0]))
        return lam0.copy(), obj, 0, STALLED, np.array([obj])


if BACKEND == "numba" and HAVE_NUMBA:
    el_newton = el_newton_numba
else:
    el_newton = el_newton_numpy

# log_star is called on small arrays from Python; numpy is as fast there.
log_star = log_star_numpy
