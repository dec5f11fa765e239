"""Row-level moment functions, their derivatives and the generic sandwich.

Every estimator reduces to the same pieces: rows ``psi_i`` of the
estimating equation for ``beta``, the stacked nuisance score rows ``U_i``
for ``theta`` and the sample means of their derivatives.  Given those,
:class:`SandwichParts` forms the plug-in covariance

    psi~ = psi - C1 C2^{-1} U,   V1 = mean psi~ psi~',
    V2   = mean dpsi/dbeta - C1 C2^{-1} mean dU/dbeta,
    Sigma = (V2' V1^{-1} V2)^{-1}

with ``C1 = mean dpsi/dtheta`` and ``C2 = mean dU/dtheta``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .data import Dataset, Diagnostic, EstimatingFunction, PropensityModel, RegressionModel
from .errors import SingularMatrixError
from .nuisance import du1_rows, du2_rows, propensity_scores, u1_rows, u2_rows

COND_WARN = 1e10


# ---------------------------------------------------------------------------
# linear algebra helpers
# ---------------------------------------------------------------------------
def _equilibrate(A):
    """Power-of-two row and column scalings that bring every max-abs entry near 1."""
    def p2(v):
        v = np.where(v > 0.0, v, 1.0)
        return np.exp2(-np.round(np.log2(v)))
    r = p2(np.abs(A).max(axis=1))
    c = p2(np.abs(A * r[:, None]).max(axis=0))
    return r, c


def solve(A, B, name, diagnostics=None):
    """``A^{-1} B`` through an equilibrated, pivoted LU factorisation.

    The condition number is measured after row and column scaling, so blocks
    in different units do not trigger false singularity reports.  Above
    ``1e10`` a diagnostic is recorded, above ``1e16`` the matrix is rejected.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if A.shape[0] == 0:
        return np.zeros((0,) + B.shape[1:])
    if not np.all(np.isfinite(A)):
        raise SingularMatrixError(f"{name} has non-finite entries")
    r, c = _equilibrate(A)
    As = A * r[:, None] * c[None, :]
    try:
        lu = sla.lu_factor(As, check_finite=False)
    except (ValueError, np.linalg.LinAlgError) as exc:  # pragma: no cover - lu_factor rarely raises
        raise SingularMatrixError(f"{name} is singular") from exc
    if np.any(np.abs(np.diag(lu[0])) <= 1e-300):
        raise SingularMatrixError(f"{name} is singular")
    cond = np.linalg.cond(As)
    if not np.isfinite(cond) or cond > 1e16:
        raise SingularMatrixError(f"{name} is numerically singular (condition number {cond:.2e})")
    if cond > COND_WARN and diagnostics is not None:
        diagnostics.append(Diagnostic("ill-conditioned", f"{name} condition number {cond:.2e} exceeds {COND_WARN:.0e}"))
    Bs = B * r.reshape((-1,) + (1,) * (B.ndim - 1))
    y = sla.lu_solve(lu, Bs, check_finite=False)
    return y * c.reshape((-1,) + (1,) * (B.ndim - 1))


# ---------------------------------------------------------------------------
# sandwich
# ---------------------------------------------------------------------------
@dataclass
class SandwichParts:
    """Sample blocks of one estimator at a parameter value.

    ``psi`` (n, r) are the estimating-equation rows, ``U`` (n, T) the stacked
    nuisance scores, ``G_beta`` = mean dpsi/dbeta (r, p), ``C1`` = mean
    dpsi/dtheta (r, T), ``C2`` = mean dU/dtheta (T, T) and ``U_beta`` = mean
    dU/dbeta (T, p).  :meth:`named` returns the blocks under the names used
    for each method (``V11``, ``A1`` ... for HT and so on).
    """

    method: str
    psi: np.ndarray
    G_beta: np.ndarray
    U: np.ndarray
    C1: np.ndarray
    C2: np.ndarray
    U_beta: np.ndarray
    extra: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list)

    _V: tuple = field(default=None, repr=False)

    @property
    def n(self):
        return self.psi.shape[0]

    @property
    def r(self):
        return self.psi.shape[1]

    @property
    def p(self):
        return self.G_beta.shape[1]

    def projection(self):
        """``C1 C2^{-1}``, shape (r, T)."""
        if self.C2.shape[0] == 0:
            return np.zeros((self.r, 0))
        return solve(self.C2.T, self.C1.T, f"{self.method} nuisance score Jacobian", self.diagnostics).T

    def blocks(self):
        """``(psi_tilde, V1, V2)``."""
        if self._V is None:
            K = self.projection()
            psi_t = self.psi - self.U @ K.T
            V1 = psi_t.T @ psi_t / self.n
            V1 = 0.5 * (V1 + V1.T)
            V2 = self.G_beta - K @ self.U_beta
            self._V = (psi_t, V1, V2)
        return self._V

    @property
    def V1(self):
        return self.blocks()[1]

    @property
    def V2(self):
        return self.blocks()[2]

    def weight(self):
        """Optimal weighting ``V2' V1^{-1}`` (p, r)."""
        _, V1, V2 = self.blocks()
        return solve(V1, V2, f"{self.method} moment covariance", self.diagnostics).T

    def sigma(self):
        """Asymptotic covariance ``(V2' V1^{-1} V2)^{-1}`` of ``sqrt(n)(beta_hat - beta)``."""
        _, V1, V2 = self.blocks()
        if self.r == self.p:
            Vi = solve(V2, np.eye(self.p), f"{self.method} estimating-equation Jacobian", self.diagnostics)
            S = Vi @ V1 @ Vi.T
        else:
            info = V2.T @ solve(V1, V2, f"{self.method} moment covariance", self.diagnostics)
            S = solve(0.5 * (info + info.T), np.eye(self.p), f"{self.method} information", self.diagnostics)
        return 0.5 * (S + S.T)

    def influence(self):
        """Influence rows ``(n, p)`` with ``cov(beta_hat) = mean(IF IF') / n``."""
        psi_t, V1, V2 = self.blocks()
        if self.r == self.p:
            return -solve(V2, psi_t.T, f"{self.method} estimating-equation Jacobian", self.diagnostics).T
        S = self.sigma()
        A = S @ solve(V1, V2, f"{self.method} moment covariance", self.diagnostics).T
        return -psi_t @ A.T

    def named(self):
        """Blocks under their method-specific names."""
        K = {"HT": ("V11", "V12", "A1", "A2"), "RRZ": ("V21", "V22", "B1", "B2"),
             "EDR": ("V31", "V32", "C1", "C2")}.get(self.method, ("V1", "V2", "C1", "C2"))
        _, V1, V2 = self.blocks()
        out = {K[0]: V1, K[1]: V2, K[2]: self.C1, K[3]: self.C2}
        if self.method == "EDR":
            out["U"] = self.U
        if self.method == "RRZ":
            out["U12"] = self.U
        return out


# ---------------------------------------------------------------------------
# problem container
# ---------------------------------------------------------------------------
class Problem:
    """Dataset plus models with the row quantities every estimator needs."""

    def __init__(self, ds: Dataset, ef: EstimatingFunction, pm: PropensityModel = None, rm: RegressionModel = None):
        self.ds, self.ef, self.pm, self.rm = ds, ef, pm, rm
        self.n = ds.n
        self.r, self.p = ef.r, ef.p
        self.x = ds.x
        self.delta = ds.delta.astype(float)
        self.idx = ds.complete_idx
        self.xc = ds.x[self.idx]
        self.yc = ds.y_complete() if self.idx.size else np.zeros((0, ds.dim_y))
        self.F = pm.features(ds.x) if pm is not None else np.zeros((self.n, 0))
        self.q = self.F.shape[1]
        self.A = rm.alpha_dim if rm is not None else 0

    # -- estimating function, zero on rows with missing y ----------------------
    def s(self, beta):
        out = np.zeros((self.n, self.r))
        if self.idx.size:
            out[self.idx] = self.ef(self.xc, self.yc, beta)
        return out

    def js(self, beta):
        out = np.zeros((self.n, self.r, self.p))
        if self.idx.size:
            out[self.idx] = self.ef.jacobian(self.xc, self.yc, beta)
        return out

    # -- propensity -------------------------------------------------------------
    def prop(self, gamma):
        """``(pi, delta/pi, d(delta/pi)/dgamma)``."""
        pi = propensity_scores(self.pm, gamma, self.x)
        r_ = self.delta / pi
        dw = -(self.delta * (1.0 - pi) / pi)[:, None] * self.F
        return pi, r_, dw

    def U1(self, pi):
        return u1_rows(self.F, self.delta, pi), du1_rows(self.F, pi)

    def U2(self, alpha):
        return u2_rows(self.ds, self.rm, alpha), du2_rows(self.ds, self.rm, alpha)

    # -- regression ---------------------------------------------------------------
    def reg(self, beta, alpha):
        """``(u, Ju_beta, Ju_alpha, xi, Jxi_beta, Jxi_alpha)``."""
        u = self.rm.u(self.x, beta, alpha)
        Jub, Jua = self.rm.jac_u(self.x, beta, alpha)
        a = self.rm.a(self.x, beta, alpha)
        Jab, Jaa = self.rm.jac_a(self.x, beta, alpha)
        xi = np.column_stack([u, a])
        return u, Jub, Jua, xi, np.concatenate([Jub, Jab], axis=1), np.concatenate([Jua, Jaa], axis=1)

    def g(self, beta, gamma, alpha):
        pi = propensity_scores(self.pm, gamma, self.x)
        w = (self.delta - pi) / pi
        xi = self.rm.xi(self.x, beta, alpha)
        return np.column_stack([w[:, None] * xi, u1_rows(self.F, self.delta, pi)])

    # -- x-products ---------------------------------------------------------------
    @staticmethod
    def xmean(a, b):
        """``mean_i a_i b_i'`` for an (n, k) and an (n, l) array -> (k, l)."""
        return a.T @ b / a.shape[0]


# ---------------------------------------------------------------------------
# per-method blocks
# ---------------------------------------------------------------------------
def plain_parts(P: Problem, beta, method="ALL"):
    """No nuisance parameters: ``psi = s`` on the rows passed in."""
    s = P.s(beta)
    G = P.js(beta).mean(axis=0)
    T = np.zeros((P.n, 0))
    return SandwichParts(method, s, G, T, np.zeros((P.r, 0)), np.zeros((0, 0)), np.zeros((0, P.p)))


def ht_mean(P: Problem, beta, gamma):
    _, r_, _ = P.prop(gamma)
    return (r_[:, None] * P.s(beta)).mean(axis=0)


def ht_jac(P: Problem, beta, gamma):
    _, r_, _ = P.prop(gamma)
    return (r_[:, None, None] * P.js(beta)).mean(axis=0)


def ht_parts(P: Problem, beta, gamma):
    pi, r_, dw = P.prop(gamma)
    s = P.s(beta)
    phi = r_[:, None] * s
    G = (r_[:, None, None] * P.js(beta)).mean(axis=0)
    C1 = P.xmean(s, dw)
    U1, dU1 = P.U1(pi)
    return SandwichParts("HT", phi, G, U1, C1, dU1.mean(axis=0), np.zeros((P.q, P.p)))


def rrz_rows(P: Problem, beta, gamma, alpha):
    pi, r_, dw = P.prop(gamma)
    w = (P.delta - pi) / pi
    s = P.s(beta)
    u, Jub, Jua, *_ = P.reg(beta, alpha)
    phi = r_[:, None] * s - w[:, None] * u
    return pi, r_, dw, w, s, u, Jub, Jua, phi


def rrz_mean(P: Problem, beta, gamma, alpha):
    return rrz_rows(P, beta, gamma, alpha)[-1].mean(axis=0)


def rrz_jac(P: Problem, beta, gamma, alpha):
    _, r_, _, w, _, _, Jub, _, _ = rrz_rows(P, beta, gamma, alpha)
    return (r_[:, None, None] * P.js(beta) - w[:, None, None] * Jub).mean(axis=0)


def rrz_parts(P: Problem, beta, gamma, alpha):
    pi, r_, dw, w, s, u, Jub, Jua, phi = rrz_rows(P, beta, gamma, alpha)
    G = (r_[:, None, None] * P.js(beta) - w[:, None, None] * Jub).mean(axis=0)
    C1 = np.concatenate([P.xmean(s - u, dw), -(w[:, None, None] * Jua).mean(axis=0)], axis=1)
    U1, dU1 = P.U1(pi)
    U2, dU2 = P.U2(alpha)
    C2 = sla.block_diag(dU1.mean(axis=0), dU2.mean(axis=0)) if P.q + P.A else np.zeros((0, 0))
    U = np.column_stack([U1, U2])
    return SandwichParts("RRZ", phi, G, U, C1.reshape(P.r, P.q + P.A), C2.reshape(P.q + P.A, P.q + P.A),
                         np.zeros((P.q + P.A, P.p)))


@dataclass
class EdrRows:
    """Row quantities of the EDR system at ``(beta, gamma, alpha, lam)``."""

    phi: np.ndarray
    g: np.ndarray
    e: np.ndarray
    dphi_b: np.ndarray
    dphi_t: np.ndarray   # (n, r, q + A + m)
    U: np.ndarray        # (n, q + A + m)
    dU_t: np.ndarray     # (n, T, T)
    dU_b: np.ndarray     # (n, T, p)


def edr_mean(P: Problem, beta, gamma, alpha, lam):
    """``mean phi3`` without derivatives (``lam`` is zero on dropped columns)."""
    _, r_, _ = P.prop(gamma)
    g = P.g(beta, gamma, alpha)
    e = 1.0 / (1.0 + g @ lam)
    u = P.rm.u(P.x, beta, alpha)
    phi = (r_ * e)[:, None] * P.s(beta) + (1.0 - e)[:, None] * u
    return phi.mean(axis=0)


def edr_rows(P: Problem, beta, gamma, alpha, lam, kept=None, whiten=True) -> EdrRows:
    """Rows and derivatives; ``kept`` restricts ``g`` to the columns the EL solve used.

    With ``whiten`` the constraint vector is expressed as ``g T`` with
    ``T = sqrt(n) R^{-1}`` from ``g = QR`` (and the multiplier as ``T^{-1}
    lam``).  The beta block of the sandwich is invariant under this change of
    coordinates while the multiplier block becomes well conditioned.
    """
    n, r, p, q, A = P.n, P.r, P.p, P.q, P.A
    pi, r_, dw = P.prop(gamma)
    w = (P.delta - pi) / pi
    s = P.s(beta)
    Js = P.js(beta)
    u, Jub, Jua, xi, Jxb, Jxa = P.reg(beta, alpha)
    U1, dU1 = P.U1(pi)
    U2, dU2 = P.U2(alpha)
    k = xi.shape[1]
    m = k + q
    # g and its derivatives
    g = np.column_stack([w[:, None] * xi, U1])
    dg_b = np.zeros((n, m, p)); dg_b[:, :k] = w[:, None, None] * Jxb
    dg_g = np.zeros((n, m, q)); dg_g[:, :k] = xi[:, :, None] * dw[:, None, :]; dg_g[:, k:] = dU1
    dg_a = np.zeros((n, m, A)); dg_a[:, :k] = w[:, None, None] * Jxa
    lam = np.asarray(lam, dtype=float)
    if kept is not None and len(kept) < m:
        kept = np.asarray(kept, dtype=np.int64)
        g, dg_b, dg_g, dg_a, lam = g[:, kept], dg_b[:, kept], dg_g[:, kept], dg_a[:, kept], lam[kept]
        m = kept.size
    if whiten and m:
        R = np.linalg.qr(g, mode="r")
        if np.all(np.abs(np.diag(R)) > 0.0):
            T = np.sqrt(n) * sla.solve_triangular(R, np.eye(m))
            g = g @ T
            dg_b, dg_g, dg_a = (np.einsum("nmk,ml->nlk", d, T) for d in (dg_b, dg_g, dg_a))
            lam = R @ lam / np.sqrt(n)
    e = 1.0 / (1.0 + g @ lam)
    e2 = e * e
    de_b = -e2[:, None] * np.einsum("m,nmp->np", lam, dg_b)
    de_g = -e2[:, None] * np.einsum("m,nmp->np", lam, dg_g)
    de_a = -e2[:, None] * np.einsum("m,nmp->np", lam, dg_a)
    de_l = -e2[:, None] * g
    c = r_[:, None] * s - u
    phi = (r_ * e)[:, None] * s + (1.0 - e)[:, None] * u
    dphi_b = (r_ * e)[:, None, None] * Js + (1.0 - e)[:, None, None] * Jub + c[:, :, None] * de_b[:, None, :]
    dphi_g = e[:, None, None] * s[:, :, None] * dw[:, None, :] + c[:, :, None] * de_g[:, None, :]
    dphi_a = (1.0 - e)[:, None, None] * Jua + c[:, :, None] * de_a[:, None, :]
    dphi_l = c[:, :, None] * de_l[:, None, :]
    dphi_t = np.concatenate([dphi_g, dphi_a, dphi_l], axis=2)
    U3 = g * e[:, None]
    dU3_b = e[:, None, None] * dg_b + g[:, :, None] * de_b[:, None, :]
    dU3_g = e[:, None, None] * dg_g + g[:, :, None] * de_g[:, None, :]
    dU3_a = e[:, None, None] * dg_a + g[:, :, None] * de_a[:, None, :]
    dU3_l = g[:, :, None] * de_l[:, None, :]
    T = q + A + m
    dU_t = np.zeros((n, T, T))
    dU_t[:, :q, :q] = dU1
    dU_t[:, q:q + A, q:q + A] = dU2
    dU_t[:, q + A:, :q] = dU3_g
    dU_t[:, q + A:, q:q + A] = dU3_a
    dU_t[:, q + A:, q + A:] = dU3_l
    dU_b = np.zeros((n, T, p))
    dU_b[:, q + A:] = dU3_b
    U = np.column_stack([U1, U2, U3])
    return EdrRows(phi, g, e, dphi_b, dphi_t, U, dU_t, dU_b)


def edr_parts(P: Problem, beta, gamma, alpha, lam, rows: EdrRows = None, kept=None):
    rows = edr_rows(P, beta, gamma, alpha, lam, kept) if rows is None else rows
    return SandwichParts("EDR", rows.phi, rows.dphi_b.mean(axis=0), rows.U, rows.dphi_t.mean(axis=0),
                         rows.dU_t.mean(axis=0), rows.dU_b.mean(axis=0), extra={"rows": rows})


def edr_total_jac(P: Problem, beta, gamma, alpha, lam, rows: EdrRows = None, kept=None):
    """d(mean phi3)/dbeta along the multiplier path ``lam(beta)`` (implicit function theorem)."""
    rows = edr_rows(P, beta, gamma, alpha, lam, kept) if rows is None else rows
    m = rows.g.shape[1]
    Gb = rows.dphi_b.mean(axis=0)
    Cl = rows.dphi_t.mean(axis=0)[:, -m:]
    D3l = rows.dU_t.mean(axis=0)[-m:, -m:]
    D3b = rows.dU_b.mean(axis=0)[-m:]
    dlam = -solve(D3l, D3b, "EL multiplier Jacobian")
    return Gb + Cl @ dlam
