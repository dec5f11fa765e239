import numpy as np
import pytest
from edrel import Observation, PropensityModel, RegressionModel, build_g, el_weights, log_star, solve_lambda
from edrel import term_design
from edrel.errors import InfeasibleError, NonConvergenceError, RankDeficientError

from oracles import oracle_lambda_1d, oracle_lambda_2d


def _problem(n, m, rng, shift=0.3):
    G = rng.normal(size=(n, m))
    return G + shift * rng.normal(size=m) / np.sqrt(n)


# -- log_star ---------------------------------------------------------------
def test_log_star_at_one():
    assert log_star(1.0, 7) == (0.0, 1.0, -1.0)


def test_log_star_at_threshold():
    n = 9
    f, d1, d2 = log_star(1.0 / n, n)
    assert abs(f + np.log(n)) < 1e-12 and abs(d1 - n) < 1e-9 and abs(d2 + n * n) < 1e-7


def test_log_star_c2_continuity():
    n = 10
    eps = 1.0 / n
    h = 1e-7
    lo, hi = log_star(np.array([eps - h]), n), log_star(np.array([eps + h]), n)
    for k in range(3):
        assert abs(lo[k][0] - hi[k][0]) <= 1e-4 * max(1.0, abs(hi[k][0]))
    # derivatives of the extension are consistent with its value
    v = np.array([0.5 * eps])
    f, d1, d2 = log_star(v, n)
    fp, fm = log_star(v + 1e-6, n)[0], log_star(v - 1e-6, n)[0]
    assert abs((fp - fm)[0] / 2e-6 - d1[0]) <= 1e-5 * abs(d1[0])
    assert abs(d2[0] + n * n) <= 1e-10 * n * n


def test_log_star_rejects_bad_n():
    with pytest.raises(ValueError):
        log_star(1.0, 0)


# -- build_g ------------------------------------------------------------------
def _const_rm(value):
    return RegressionModel(lambda x, b, a: np.full((x.shape[0], 1), value), 0, features=term_design(["1"]))


def test_build_g_hand_value():
    t = Observation(np.zeros(1), None, 0)
    g = build_g(t, np.zeros(1), np.zeros(1), np.zeros(0), PropensityModel(), _const_rm(2.0))
    np.testing.assert_allclose(g, [-2.0, -1.0, -0.5])


def test_build_g_vanishes_when_pi_one():
    t = Observation(np.zeros(1), np.ones(1), 1)
    g = build_g(t, np.zeros(1), np.array([40.0]), np.zeros(0), PropensityModel(), _const_rm(2.0))
    assert np.all(np.abs(g[:2]) < 1e-10)


def test_build_g_mean_response_length():
    rm = RegressionModel.linear_mean(term_design(["1", "x1"]))
    pm = PropensityModel(term_design(["x1", "x2"]))
    t = Observation(np.array([0.3, -0.2]), np.array([1.0]), 1)
    assert build_g(t, np.zeros(1), np.zeros(3), np.zeros(2), pm, rm).size == 2 + 3


# -- solve_lambda -------------------------------------------------------------
def test_symmetric_rows_give_zero_lambda():
    G = np.array([[-1.0], [1.0], [-2.0], [2.0]])
    st = solve_lambda(G)
    assert st.converged and np.all(st.lam == 0)
    np.testing.assert_allclose(st.weights, 0.25)


@pytest.mark.parametrize("seed", range(8))
def test_grid_oracle_1d(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 31))
    g = _problem(n, 1, rng)[:, 0]
    st = solve_lambda(g[:, None])
    assert st.converged
    assert abs(st.lam[0] - oracle_lambda_1d(g)) <= 1e-4
    assert np.linalg.norm(st.weights @ g) <= 1e-8


@pytest.mark.parametrize("seed", range(4))
def test_grid_oracle_2d(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(15, 31))
    G = _problem(n, 2, rng)
    st = solve_lambda(G)
    assert st.converged
    np.testing.assert_allclose(st.lam, oracle_lambda_2d(G), atol=1e-4)


def test_solution_invariants_random():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n, m = int(rng.integers(20, 300)), int(rng.integers(1, 6))
        G = _problem(n, m, rng, shift=1.0) * rng.lognormal(size=m)
        st = solve_lambda(G)
        if not st.converged:
            continue
        assert abs(st.weights.sum() - 1.0) <= 1e-8
        assert np.all(st.weights > 0)
        assert np.linalg.norm(st.weights @ G) <= 1e-8
        assert st.min_denominator > 1.0 / n - 1e-12
        assert np.all(np.diff(st.trace) >= -1e-9 * np.maximum(1.0, np.abs(st.trace[1:])))


def test_scale_equivariance():
    rng = np.random.default_rng(8)
    G = _problem(40, 3, rng)
    a = solve_lambda(G)
    b = solve_lambda(5.0 * G)
    np.testing.assert_allclose(b.lam, a.lam / 5.0, rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(b.weights, a.weights, rtol=1e-10)


def test_infeasible_is_flagged():
    rng = np.random.default_rng(9)
    G = np.abs(rng.normal(size=(30, 2))) + 0.1
    st = solve_lambda(G)
    assert not st.converged
    with pytest.raises((InfeasibleError, NonConvergenceError)):
        solve_lambda(G, raise_on_failure=True)


def test_rank_deficient_error_names_columns():
    rng = np.random.default_rng(10)
    G = _problem(30, 2, rng)
    G3 = np.column_stack([G, 2.0 * G[:, 0]])
    with pytest.raises(RankDeficientError) as info:
        solve_lambda(G3)
    assert info.value.columns in ((0,), (2,))


def test_rank_deficient_drop():
    rng = np.random.default_rng(10)
    G = _problem(30, 2, rng)
    G3 = np.column_stack([G, G[:, 0] + G[:, 1]])
    st = solve_lambda(G3, rank_policy="drop")
    assert st.converged and len(st.dropped) == 1
    assert st.lam[st.dropped[0]] == 0.0
    assert np.linalg.norm(st.weights @ G3) <= 1e-8


def test_more_columns_than_rows():
    with pytest.raises(RankDeficientError):
        solve_lambda(np.ones((2, 3)))


def test_warm_start_same_solution():
    rng = np.random.default_rng(12)
    G = _problem(60, 3, rng)
    a = solve_lambda(G)
    b = solve_lambda(G, lam0=a.lam * 0.9)
    np.testing.assert_allclose(a.lam, b.lam, atol=1e-8)


def test_el_weights_examples():
    np.testing.assert_allclose(el_weights(np.zeros(1), np.array([[-1.0], [1.0]])), [0.5, 0.5])
    np.testing.assert_allclose(el_weights(np.zeros(2), np.ones((4, 2))), 0.25)
    with pytest.raises(InfeasibleError):
        el_weights(np.array([2.0]), np.array([[-1.0], [1.0]]))
