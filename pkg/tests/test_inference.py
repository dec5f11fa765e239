import numpy as np
import pytest

from edrel import (Dataset, PropensityModel, RegressionModel, bootstrap_se, estimate_edr, estimate_ht,
                   estimate_rrz, mean_response_function, term_design, var_edr, var_ht, var_rrz)
from edrel.errors import BootstrapError, InfeasibleError
from edrel.inference import var_from_report, wald_ci

from conftest import model_problem

MEAN = mean_response_function(1)


def _zero_rm():
    return RegressionModel(lambda x, b, a: np.zeros((x.shape[0], 1)), 0, features=term_design(["1"]))


def test_wald_ci():
    ci = wald_ci(np.array([1.0]), np.array([0.5]), 0.95)
    np.testing.assert_allclose(ci, [[1 - 1.959963984540054 * 0.5, 1 + 1.959963984540054 * 0.5]])
    with pytest.raises(ValueError):
        wald_ci(np.zeros(1), np.ones(1), 1.5)


def test_ht_complete_data_is_sample_variance():
    rng = np.random.default_rng(0)
    y = rng.normal(size=40)
    ds = Dataset(np.ones((40, 1)), np.ones(40, int), y)
    pm = PropensityModel(known=lambda x: x[:, 0])
    rep = estimate_ht(ds, MEAN, pm)
    cov = var_ht(rep, ds, MEAN, pm)
    assert abs(cov.sigma_hat[0, 0] - y.var()) < 1e-12
    assert cov.source == "sandwich" and cov.ci[0, 0] < rep.beta_hat[0] < cov.ci[0, 1]


def _ht_sandwich_by_hand(x, delta, y, gamma):
    """Independent HT sandwich for the mean with a logistic propensity on (1, x)."""
    n = x.size
    F = np.column_stack([np.ones(n), x])
    pi = 1 / (1 + np.exp(-(F @ gamma)))
    beta = np.sum(delta * y / pi) / np.sum(delta / pi)
    s = np.where(delta == 1, y - beta, 0.0)
    phi = delta * s / pi
    V12 = -np.mean(delta / pi)
    A1 = np.array([np.mean(-delta * s * (1 - pi) / pi * F[:, j]) for j in range(2)])
    A2 = np.zeros((2, 2))
    for i in range(n):
        A2 -= pi[i] * (1 - pi[i]) * np.outer(F[i], F[i]) / n
    U1 = (delta - pi)[:, None] * F
    tilde = phi - U1 @ np.linalg.solve(A2.T, A1)
    V11 = np.mean(tilde**2)
    return beta, V11 / V12**2


def test_ht_sandwich_independent_reimplementation():
    rng = np.random.default_rng(1)
    n = 50
    x = rng.normal(size=n)
    delta = (rng.random(n) < 1 / (1 + np.exp(-(0.7 + x)))).astype(int)
    y = 1 + x + rng.normal(size=n)
    ds = Dataset(x[:, None], delta, y[delta == 1])
    pm = PropensityModel(term_design(["x1"]))
    rep = estimate_ht(ds, MEAN, pm)
    beta, sigma = _ht_sandwich_by_hand(x, delta, np.where(delta == 1, y, 0.0), rep.theta_hat["gamma"])
    assert abs(rep.beta_hat[0] - beta) < 1e-10
    assert abs(var_ht(rep, ds, MEAN, pm).sigma_hat[0, 0] - sigma) <= 1e-10 * max(1.0, sigma)


def test_var_rrz_with_zero_u_equals_var_ht(m1):
    _, draw, ef, pm, _, opts = m1
    ht = estimate_ht(draw.ds, ef, pm, opts)
    rrz = estimate_rrz(draw.ds, ef, pm, _zero_rm(), opts)
    a = var_ht(ht, draw.ds, ef, pm)
    b = var_rrz(rrz, draw.ds, ef, pm, _zero_rm())
    assert np.array_equal(a.sigma_hat, b.sigma_hat)
    assert np.array_equal(a.se, b.se)


@pytest.mark.parametrize("problem", ["m1", "m2", "m3"])
def test_var_functions_match_report(problem, request):
    _, draw, ef, pm, rm, opts = request.getfixturevalue(problem)
    for est, var in ((estimate_ht(draw.ds, ef, pm, opts), lambda r: var_ht(r, draw.ds, ef, pm)),
                     (estimate_rrz(draw.ds, ef, pm, rm, opts), lambda r: var_rrz(r, draw.ds, ef, pm, rm)),
                     (estimate_edr(draw.ds, ef, pm, rm, opts), lambda r: var_edr(r, draw.ds, ef, pm, rm))):
        cov = var(est)
        np.testing.assert_allclose(cov.cov, est.covariance, rtol=1e-10)
        np.testing.assert_allclose(var_from_report(est).sigma_hat, cov.sigma_hat, rtol=1e-12)
        S = cov.sigma_hat
        assert np.max(np.abs(S - S.T)) <= 1e-12 * max(1.0, np.abs(S).max())
        assert np.linalg.eigvalsh(S).min() >= -1e-10 * np.trace(S)
        assert np.all((cov.ci[:, 0] <= est.beta_hat) & (est.beta_hat <= cov.ci[:, 1]))


def test_var_edr_zero_lambda_known_pi_is_psd():
    rng = np.random.default_rng(0)
    x = np.repeat(rng.normal(size=10), 2)
    delta = np.tile([1, 0], 10)
    ds = Dataset(np.column_stack([np.full(20, 0.5), x]), delta, 1 + x[delta == 1] + rng.normal(size=10))
    pm = PropensityModel(known=lambda x: x[:, 0])
    rm = RegressionModel.linear_mean(term_design(["1", "x2"]))
    rep = estimate_edr(ds, MEAN, pm, rm)
    cov = var_edr(rep, ds, MEAN, pm, rm)
    assert np.all(np.isfinite(cov.sigma_hat)) and cov.sigma_hat[0, 0] > 0


def _ht_fn(pm, ef=MEAN):
    return lambda d: estimate_ht(d, ef, pm)


def test_bootstrap_constant_response():
    ds = Dataset(np.linspace(-1, 1, 30)[:, None], np.tile([1, 1, 0], 10), np.full(20, 4.0))
    cov = bootstrap_se(ds, _ht_fn(PropensityModel(term_design(["x1"]))), B=60, seed=3)
    assert cov.se[0] < 1e-12 and cov.source == "bootstrap"


def test_bootstrap_determinism_and_jobs(m1):
    _, draw, ef, pm, _, _ = m1
    a = bootstrap_se(draw.ds, _ht_fn(pm), B=60, seed=5)
    b = bootstrap_se(draw.ds, _ht_fn(pm), B=60, seed=5)
    c = bootstrap_se(draw.ds, _ht_fn(pm), B=60, seed=5, jobs=2)
    assert a.se.tobytes() == b.se.tobytes() == c.se.tobytes()
    assert a.replicates.tobytes() == c.replicates.tobytes()
    d = bootstrap_se(draw.ds, _ht_fn(pm), B=60, seed=6)
    assert d.se[0] != a.se[0]


def test_bootstrap_needs_50():
    ds = Dataset.complete(np.zeros(5), np.arange(5.0))
    with pytest.raises(ValueError):
        bootstrap_se(ds, _ht_fn(PropensityModel()), B=10)


def test_bootstrap_too_many_failures(m1):
    _, draw, *_ = m1

    def fail(d):
        raise InfeasibleError("always")

    with pytest.raises(BootstrapError, match="60 of 60"):
        bootstrap_se(draw.ds, fail, B=60, point=[0.0])


def test_bootstrap_drops_and_counts_failures(m1):
    _, draw, ef, pm, _, _ = m1
    calls = {"n": 0}

    def sometimes(d):
        calls["n"] += 1
        if calls["n"] % 40 == 0:
            raise InfeasibleError("sometimes")
        return estimate_ht(d, ef, pm)

    cov = bootstrap_se(draw.ds, sometimes, B=80, seed=1, point=[6.0])
    assert cov.failures == 2 and cov.replicates.shape == (78, 1)
    assert any(d.code == "bootstrap-failures" for d in cov.diagnostics)
