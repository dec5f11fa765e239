"""Analytic derivatives against central finite differences (rel err <= 1e-5)."""
import numpy as np
import pytest

from edrel import estimate_edr, estimate_ht, estimate_rrz, solve_lambda
from edrel import _moments as M
from edrel import simlab as S
from edrel.data import fd_jacobian
from edrel.nuisance import fit_propensity, fit_regression

TOL = 1e-5


def close(analytic, numeric):
    a, b = np.asarray(analytic), np.asarray(numeric)
    err = np.max(np.abs(a - b)) if a.size else 0.0
    assert err <= TOL * max(1.0, float(np.max(np.abs(a))) if a.size else 1.0), err


def fd_richardson(f, v, h):
    """Central differences at h and h/2 combined to cancel the O(h^2) term."""
    return (4.0 * fd_jacobian(f, v, h / 2.0) - fd_jacobian(f, v, h)) / 3.0


def _setup(problem, request):
    _, draw, ef, pm, rm, opts = request.getfixturevalue(problem)
    rep = estimate_edr(draw.ds, ef, pm, rm, opts)
    th = rep.theta_hat
    P = M.Problem(draw.ds, ef, pm, rm)
    return P, rep.beta_hat, th["gamma"], th["alpha"], th["lambda"], rep.el_state.kept


PROBLEMS = ["m1", "m2", "m3"]


@pytest.mark.parametrize("problem", PROBLEMS)
def test_edr_row_derivatives(problem, request):
    P, b, g, a, lam, _ = _setup(problem, request)
    # move off the solution so that no derivative vanishes by construction
    rng = np.random.default_rng(0)
    b = b + 0.01 * rng.normal(size=b.size)
    lam = lam * 0.9
    q, A = g.size, a.size
    rows = M.edr_rows(P, b, g, a, lam, whiten=False)

    def at(bb=b, gg=g, aa=a, ll=lam):
        return M.edr_rows(P, bb, gg, aa, ll, whiten=False)

    theta = np.concatenate([g, a, lam])

    def split(t):
        return t[:q], t[q:q + A], t[q + A:]

    # steps sized so that 1 + lam'g_i moves by ~1e-4 at most: near-collinear g
    # gives huge raw multipliers for which the default relative step is too coarse
    def lam_g(t):
        gg, aa, _ = split(t)
        return P.g(b, gg, aa) @ lam

    sens = np.abs(fd_jacobian(lam_g, theta, np.full(theta.size, 1e-9))).max(axis=0)
    sens[q + A:] = np.abs(rows.g).max(axis=0)
    h = 1e-4 / np.maximum(sens, 1.0)
    close(rows.dphi_b, fd_jacobian(lambda v: at(bb=v).phi, b))
    close(rows.dphi_t, fd_richardson(lambda t: at(*(b,) + split(t)).phi, theta, h))
    close(rows.dU_b, fd_jacobian(lambda v: at(bb=v).U, b))
    close(rows.dU_t, fd_richardson(lambda t: at(*(b,) + split(t)).U, theta, h))


@pytest.mark.parametrize("problem", PROBLEMS)
def test_edr_total_jacobian(problem, request):
    P, b, g, a, lam, kept = _setup(problem, request)
    policy = "drop" if problem == "m2" else "error"

    def mean_at(v):
        st = solve_lambda(P.g(v, g, a), rank_policy=policy)
        return M.edr_mean(P, v, g, a, st.lam)

    close(M.edr_total_jac(P, b, g, a, lam, kept=kept), fd_jacobian(mean_at, b))


@pytest.mark.parametrize("problem", ["m1", "m3"])
def test_edr_whitening_leaves_beta_blocks_unchanged(problem, request):
    P, b, g, a, lam, kept = _setup(problem, request)
    raw = M.edr_parts(P, b, g, a, lam, rows=M.edr_rows(P, b, g, a, lam, whiten=False))
    wh = M.edr_parts(P, b, g, a, lam)
    np.testing.assert_allclose(wh.sigma(), raw.sigma(), rtol=1e-7)
    np.testing.assert_allclose(M.edr_total_jac(P, b, g, a, lam, rows=M.edr_rows(P, b, g, a, lam, whiten=False)),
                               M.edr_total_jac(P, b, g, a, lam), rtol=1e-8)


@pytest.mark.parametrize("problem", PROBLEMS)
def test_ht_blocks(problem, request):
    _, draw, ef, pm, rm, opts = request.getfixturevalue(problem)
    P = M.Problem(draw.ds, ef, pm, rm)
    b = estimate_ht(draw.ds, ef, pm, opts).beta_hat + 0.01
    g = fit_propensity(draw.ds, pm).gamma_hat
    parts = M.ht_parts(P, b, g)
    close(parts.G_beta, fd_jacobian(lambda v: M.ht_mean(P, v, g), b))
    close(M.ht_jac(P, b, g), parts.G_beta)
    close(parts.C1, fd_jacobian(lambda v: M.ht_mean(P, b, v), g))
    close(parts.C2, fd_jacobian(lambda v: M.ht_parts(P, b, v).U.mean(axis=0), g))


@pytest.mark.parametrize("problem", PROBLEMS)
def test_rrz_blocks(problem, request):
    _, draw, ef, pm, rm, opts = request.getfixturevalue(problem)
    P = M.Problem(draw.ds, ef, pm, rm)
    b = estimate_rrz(draw.ds, ef, pm, rm, opts).beta_hat + 0.01
    g = fit_propensity(draw.ds, pm).gamma_hat
    a = fit_regression(draw.ds, rm, ef).alpha_hat + 0.01
    q = g.size
    parts = M.rrz_parts(P, b, g, a)
    theta = np.concatenate([g, a])
    close(parts.G_beta, fd_jacobian(lambda v: M.rrz_mean(P, v, g, a), b))
    close(M.rrz_jac(P, b, g, a), parts.G_beta)
    close(parts.C1, fd_jacobian(lambda t: M.rrz_mean(P, b, t[:q], t[q:]), theta))
    close(parts.C2, fd_jacobian(lambda t: M.rrz_parts(P, b, t[:q], t[q:]).U.mean(axis=0), theta))


def test_model3_working_regression_jacobians():
    rng = np.random.default_rng(1)
    rm = S.regression_working_model(("1", "x1", "x2"))
    x = np.column_stack([rng.exponential(size=15), rng.normal(size=15)])
    for _ in range(5):
        b, a = rng.normal(size=3), rng.normal(size=3)
        jb, ja = rm.jac_u(x, b, a)
        close(jb, fd_jacobian(lambda v: rm.u(x, v, a), b))
        close(ja, fd_jacobian(lambda v: rm.u(x, b, v), a))


def test_linear_mean_jacobians():
    rng = np.random.default_rng(2)
    rm = S.build_models(S.SimDesign(model=2, tau=(1, 0, 0), k=2))[2]
    x = rng.normal(size=(12, 1))
    b, a = rng.normal(size=1), rng.normal(size=rm.alpha_dim)
    jb, ja = rm.jac_u(x, b, a)
    close(jb, fd_jacobian(lambda v: rm.u(x, v, a), b))
    close(ja, fd_jacobian(lambda v: rm.u(x, b, v), a))
