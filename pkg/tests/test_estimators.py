from dataclasses import replace

import numpy as np
import pytest

from edrel import (Dataset, EstimatingFunction, EstimatorOptions, PropensityModel, RegressionModel,
                   edr_mean_response, estimate_all, estimate_cca, estimate_edr, estimate_el_profile,
                   estimate_ht, estimate_rrz, mean_response_function, profile_el_loglik, solve_lambda,
                   solve_outer, term_design)
from edrel import _moments as M
from edrel import estimators as E
from edrel.errors import ConfigError, DataError, NonConvergenceError
from edrel.nuisance import fit_propensity, fit_regression

from conftest import model_problem
from oracles import el_mean_oracle, oracle_lambda_nd, profile_loglik_oracle

MEAN = mean_response_function(1)


def _known(pi_col=0):
    """Known propensity read from column ``pi_col`` of x."""
    return PropensityModel(known=lambda x: x[:, pi_col])


def _zero_rm(r=1):
    return RegressionModel(lambda x, b, a: np.zeros((x.shape[0], r)), 0, features=term_design(["1"]))


# -- solve_outer -------------------------------------------------------------
def test_solve_outer_linear_one_step():
    beta, tr = solve_outer(lambda b: b - 3.0, lambda b: np.eye(1), np.zeros(1))
    assert beta[0] == 3.0 and tr.iterations == 1


def test_solve_outer_cube_root():
    beta, _ = solve_outer(lambda b: b**3 - 8.0, lambda b: np.diag(3 * b**2), np.ones(1))
    assert abs(beta[0] - 2.0) <= 1e-8


def test_solve_outer_fd_jacobian():
    beta, _ = solve_outer(lambda b: np.array([b[0] ** 2 - 2.0, b[0] * b[1] - 1.0]), None, np.ones(2))
    np.testing.assert_allclose(beta, [np.sqrt(2), 1 / np.sqrt(2)], atol=1e-8)


def test_solve_outer_flat_residual_fails():
    with pytest.raises(NonConvergenceError):
        solve_outer(lambda b: np.array([1.0]), None, np.zeros(1))


def test_solve_outer_singular_jacobian_uses_secant():
    # J(0) = 0: the first step has to come from the secant fallback
    beta, tr = solve_outer(lambda b: b**3 - 1.0, lambda b: np.diag(3 * b**2), np.zeros(1))
    assert abs(beta[0] - 1.0) <= 1e-8 and tr.secant_steps >= 1


# -- ALL and CCA ---------------------------------------------------------------
def test_all_sample_mean():
    rep = estimate_all(Dataset.complete(np.zeros(3), [1.0, 2.0, 3.0]), MEAN)
    assert abs(rep.beta_hat[0] - 2.0) < 1e-12


def test_all_refuses_missing():
    with pytest.raises(DataError):
        estimate_all(Dataset(np.zeros((2, 1)), [1, 0], [1.0]), MEAN)


def _el_two_moment_oracle(y):
    """Profile EL over beta for s = (y1 - b, y2 - b) by golden section on the oracle multiplier."""
    def prof(b):
        S = y - b
        lam = oracle_lambda_nd(S)
        return -float(np.sum(np.log(1.0 + S @ lam)))

    lo, hi = sorted(y.mean(axis=0))
    ratio = (np.sqrt(5) - 1) / 2
    a, c = lo, hi
    while c - a > 1e-11:
        u, v = c - ratio * (c - a), a + ratio * (c - a)
        if prof(u) > prof(v):
            c = v
        else:
            a = u
    return 0.5 * (a + c)


def test_all_overidentified_matches_el_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=30)
    y = np.column_stack([2 + x + rng.normal(size=30), 2 + x + x * rng.normal(size=30)])
    rep = estimate_all(Dataset.complete(x, y), mean_response_function(2))
    lo, hi = sorted(y.mean(axis=0))
    assert lo <= rep.beta_hat[0] <= hi
    assert abs(rep.beta_hat[0] - _el_two_moment_oracle(y)) <= 1e-6


def test_cca_examples():
    ds = Dataset(np.zeros((3, 1)), [1, 1, 0], [1.0, 3.0])
    assert abs(estimate_cca(ds, MEAN).beta_hat[0] - 2.0) < 1e-12
    rep_n = estimate_cca(ds, MEAN, EstimatorOptions(cca_divisor="n"))
    assert abs(rep_n.beta_hat[0] - 4.0 / 3.0) < 1e-12
    full = Dataset.complete(np.zeros(3), [1.0, 2.0, 4.0])
    assert estimate_cca(full, MEAN).beta_hat[0] == estimate_all(full, MEAN).beta_hat[0]


def test_cca_divisor_n_needs_mean():
    ds = Dataset(np.zeros((3, 1)), [1, 1, 0], [[1.0, 2.0], [3.0, 4.0]], dim_y=2)
    with pytest.raises(ConfigError):
        estimate_cca(ds, mean_response_function(2), EstimatorOptions(cca_divisor="n"))


# -- HT and RRZ ------------------------------------------------------------------
def test_ht_closed_form_weighted_mean():
    pi = np.array([0.5, 0.5, 1.0, 0.5])
    ds = Dataset(pi[:, None], [1, 1, 1, 0], [1.0, 2.0, 3.0])
    assert abs(estimate_ht(ds, MEAN, _known()).beta_hat[0] - 1.8) < 1e-10


def test_ht_weights_collapse():
    ds = Dataset(np.ones((4, 1)), [1, 1, 1, 1], [1.0, 2.0, 3.0, 6.0])
    assert abs(estimate_ht(ds, MEAN, _known()).beta_hat[0] - 3.0) < 1e-10


def test_rrz_with_zero_u_is_ht(m1):
    _, draw, ef, pm, _, opts = m1
    ht = estimate_ht(draw.ds, ef, pm, opts)
    rrz = estimate_rrz(draw.ds, ef, pm, _zero_rm(), opts)
    assert np.array_equal(ht.beta_hat, rrz.beta_hat)
    assert np.array_equal(ht.theta_hat["gamma"], rrz.theta_hat["gamma"])
    assert np.array_equal(ht.covariance, rrz.covariance)


def test_rrz_ignores_u_when_complete_and_pi_one():
    ds = Dataset(np.ones((4, 1)), [1, 1, 1, 1], [1.0, 2.0, 3.0, 6.0])
    rm = RegressionModel(lambda x, b, a: np.full((x.shape[0], 1), 100.0), 0, features=term_design(["1"]))
    assert abs(estimate_rrz(ds, MEAN, _known(), rm).beta_hat[0] - 3.0) < 1e-10


# -- EDR ---------------------------------------------------------------------------
def _balanced_pairs(n=20, seed=0):
    """Pairs with equal x, one observed and one missing, pi = 0.5: sum g = 0 at any beta."""
    rng = np.random.default_rng(seed)
    x = np.repeat(rng.normal(size=n // 2), 2)
    delta = np.tile([1, 0], n // 2)
    y = 1.0 + x[delta == 1] + rng.normal(size=n // 2)
    return Dataset(np.column_stack([np.full(n, 0.5), x]), delta, y)


def test_edr_zero_lambda_equals_ht():
    ds = _balanced_pairs()
    rm = RegressionModel.linear_mean(term_design(["1", "x2"]))
    edr = estimate_edr(ds, MEAN, _known(), rm)
    ht = estimate_ht(ds, MEAN, _known())
    assert np.max(np.abs(edr.theta_hat["lambda"])) < 1e-12
    np.testing.assert_allclose(edr.el_state.weights, 1.0 / ds.n)
    assert abs(edr.beta_hat[0] - ht.beta_hat[0]) < 1e-12
    assert abs(edr_mean_response(ds, _known(), rm).beta_hat[0] - ht.beta_hat[0]) < 1e-12


def test_edr_matches_closed_form_oracle():
    rng = np.random.default_rng(3)
    n = 20
    x = rng.normal(size=n)
    pi = 1 / (1 + np.exp(-(0.8 + 0.5 * x)))
    delta = (rng.random(n) < pi).astype(int)
    y = 1 + 2 * x + rng.normal(size=n)
    ds = Dataset(np.column_stack([pi, x]), delta, y[delta == 1])
    alpha = np.array([0.9, 1.7])
    rm = RegressionModel.linear_mean(term_design(["1", "x2"]), alpha=alpha)
    mfit = alpha[0] + alpha[1] * x
    ref, _ = el_mean_oracle(np.where(delta == 1, y, 0.0), delta, pi, mfit)
    assert abs(estimate_edr(ds, MEAN, _known(), rm).beta_hat[0] - ref) <= 1e-5
    assert abs(edr_mean_response(ds, _known(), rm).beta_hat[0] - ref) <= 1e-5


TAUS = [(1, 0, 0, 0), (1, 0.5, 0.5, 0), (0.5, -0.5, 0.5, 0), (0.5, 0.5, 1, 0), (0, 0.5, 1, 1), (-1, 0.5, 1, 1)]


def test_fast_path_equals_nested_solve_50_draws():
    worst = 0.0
    for i in range(50):
        _, draw, ef, pm, rm, opts = model_problem(1, TAUS[i % 6], k=(1, 2, 4)[i % 3], index=i)
        a = estimate_edr(draw.ds, ef, pm, rm, opts)
        b = edr_mean_response(draw.ds, pm, rm, opts)
        worst = max(worst, abs(a.beta_hat[0] - b.beta_hat[0]))
        np.testing.assert_allclose(a.covariance, b.covariance, rtol=1e-6)
    assert worst <= 1e-8


@pytest.mark.parametrize("method", ["HT", "RRZ", "EDR"])
@pytest.mark.parametrize("problem", ["m1", "m3"])
def test_two_step_machinery_equals_direct_path(method, problem, request):
    _, draw, ef, pm, rm, opts = request.getfixturevalue(problem)
    fn = {"HT": lambda o: estimate_ht(draw.ds, ef, pm, o), "RRZ": lambda o: estimate_rrz(draw.ds, ef, pm, rm, o),
          "EDR": lambda o: estimate_edr(draw.ds, ef, pm, rm, o)}[method]
    direct = fn(replace(opts, weighting="identity"))
    two = fn(replace(opts, weighting="two-step"))
    assert np.max(np.abs(direct.beta_hat - two.beta_hat)) <= 1e-8


def test_gmm_forced_identity_second_stage(m3):
    _, draw, ef, pm, rm, opts = m3
    P = M.Problem(draw.ds, ef, pm)
    gamma = fit_propensity(draw.ds, pm).gamma_hat

    class Ident:
        def weight(self):
            return np.eye(3)

    b0 = E._cc_start(draw.ds, ef)
    args = (lambda b: M.ht_mean(P, b, gamma), lambda b: M.ht_jac(P, b, gamma))
    direct, *_ = E._gmm(*args, None, b0, 3, 3, replace(opts, weighting="identity"))
    forced, *_ = E._gmm(*args, lambda b: Ident(), b0, 3, 3, replace(opts, weighting="two-step"))
    assert np.max(np.abs(direct - forced)) <= 1e-8


def test_edr_analytic_outer_jacobian_same_root(m3):
    _, draw, ef, pm, rm, opts = m3
    a = estimate_edr(draw.ds, ef, pm, rm, opts)
    b = estimate_edr(draw.ds, ef, pm, rm, replace(opts, jacobian="analytic"))
    assert np.max(np.abs(a.beta_hat - b.beta_hat)) <= 1e-8


def test_edr_warm_start_same_root(m2):
    _, draw, ef, pm, rm, opts = m2
    a = estimate_edr(draw.ds, ef, pm, rm, opts)
    b = estimate_edr(draw.ds, ef, pm, rm, replace(opts, warm_start=True))
    assert abs(a.beta_hat[0] - b.beta_hat[0]) <= 1e-8


def test_edr_overidentified_model2(m2):
    _, draw, ef, pm, rm, opts = m2
    rep = estimate_edr(draw.ds, ef, pm, rm, opts)
    assert rep.converged and rep.residual_norm <= opts.tol
    assert len(rep.el_state.dropped) == 1
    assert abs(rep.beta_hat[0] - 5.0) < 1.5


@pytest.mark.parametrize("method", ["CCA", "HT", "RRZ", "EDR"])
def test_bitwise_determinism(method, m3):
    _, draw, ef, pm, rm, opts = m3
    fn = {"CCA": lambda: estimate_cca(draw.ds, ef, opts), "HT": lambda: estimate_ht(draw.ds, ef, pm, opts),
          "RRZ": lambda: estimate_rrz(draw.ds, ef, pm, rm, opts),
          "EDR": lambda: estimate_edr(draw.ds, ef, pm, rm, opts)}[method]
    a, b = fn(), fn()
    assert a.beta_hat.tobytes() == b.beta_hat.tobytes()
    assert a.covariance.tobytes() == b.covariance.tobytes()


@pytest.mark.parametrize("method", ["HT", "RRZ", "EDR"])
def test_report_invariants(method, m1):
    _, draw, ef, pm, rm, opts = m1
    rep = {"HT": lambda: estimate_ht(draw.ds, ef, pm, opts), "RRZ": lambda: estimate_rrz(draw.ds, ef, pm, rm, opts),
           "EDR": lambda: estimate_edr(draw.ds, ef, pm, rm, opts)}[method]()
    assert rep.converged and rep.residual_norm <= opts.tol
    C = rep.covariance
    assert np.allclose(C, C.T, atol=1e-12)
    assert np.linalg.eigvalsh(C).min() >= -1e-10 * np.trace(C)
    IF = rep.influence()
    np.testing.assert_allclose(IF.T @ IF / rep.n**2, C, rtol=1e-8)


def test_options_validation():
    with pytest.raises(ConfigError):
        EstimatorOptions(weighting="optimal")


# -- profile EL ----------------------------------------------------------------------
def _toy(n=20, seed=4):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    delta = (rng.random(n) < 1 / (1 + np.exp(-(1 + 0.5 * x)))).astype(int)
    y = 1 + x + rng.normal(size=n)
    return Dataset(x[:, None], delta, y[delta == 1])


def test_profile_loglik_matches_oracle():
    ds = _toy()
    pm = PropensityModel(term_design(["x1"]))
    rm = RegressionModel.linear_mean(term_design(["1", "x1"]))
    gamma = fit_propensity(ds, pm).gamma_hat
    beta = estimate_ht(ds, MEAN, pm).beta_hat + 0.05
    val, st = profile_el_loglik(ds, MEAN, pm, rm, beta, gamma, return_state=True)
    P = M.Problem(ds, MEAN, pm, rm)
    assert abs(val - profile_loglik_oracle(st.g_matrix)) <= 1e-6
    alpha = fit_regression(ds, rm).alpha_hat
    assert abs(val - profile_loglik_oracle(E._psi_rows(P, beta, gamma, alpha))) <= 1e-6


def test_profile_loglik_maximum_when_rows_sum_to_zero():
    # with lambda = 0 feasible at the root, the value is -n log n
    ds = _balanced_pairs(20)
    pm = PropensityModel()
    rm = RegressionModel.linear_mean(term_design(["1", "x2"]))
    gamma = np.zeros(1)
    ht = estimate_ht(ds, MEAN, PropensityModel(gamma=gamma))
    # pi is constant, so w and the propensity score column coincide up to scale
    assert profile_el_loglik(ds, MEAN, pm, rm, ht.beta_hat, gamma) == -np.inf
    val = profile_el_loglik(ds, MEAN, pm, rm, ht.beta_hat, gamma, rank_policy="drop")
    assert abs(val + ds.n * np.log(ds.n)) <= 1e-9


def test_profile_el_optimality_and_start():
    ds = _toy(200, 6)
    pm = PropensityModel(term_design(["x1"]))
    rm = RegressionModel.linear_mean(term_design(["1", "x1"]))
    rep = estimate_el_profile(ds, MEAN, pm, rm)
    assert rep.theta_hat["log_el"] >= rep.theta_hat["log_el_start"]
    b, g = rep.beta_hat, rep.theta_hat["gamma"]
    best = profile_el_loglik(ds, MEAN, pm, rm, b, g, rep.theta_hat["alpha"])
    for db in (-1e-3, 1e-3):
        assert profile_el_loglik(ds, MEAN, pm, rm, b + db, g, rep.theta_hat["alpha"]) <= best + 1e-9
    again = estimate_el_profile(ds, MEAN, pm, rm, start=rep)
    assert abs(again.beta_hat[0] - rep.beta_hat[0]) <= 1e-4
    assert again.theta_hat["log_el"] >= rep.theta_hat["log_el"]


def test_profile_el_guards():
    ds = _toy(60)
    rm = RegressionModel.linear_mean(term_design(["1", "x1"]))
    with pytest.raises(ConfigError):
        estimate_el_profile(ds, MEAN, PropensityModel(known=lambda x: np.full(x.shape[0], 0.7)), rm)
    big = PropensityModel(term_design(["x1", "x1^2", "x1^3", "x1^4", "x1^5", "x1^6", "x1^7", "x1^8"]))
    with pytest.raises(ConfigError, match="exceeds"):
        estimate_el_profile(ds, MEAN, big, rm)
