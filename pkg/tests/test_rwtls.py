import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from mlsadjust import rwtls
from mlsadjust.exceptions import IllConditionedError, InvalidInputError
from mlsadjust.rwtls import (
    EivProblem, RobustWeightedTLS, SolverOptions, build_coefficient_matrix, igg3_weights, ivec,
    objective, robust_reweight, solve, vec,
)

import oracles
from helpers import random_problem, wls


# --- vec / ivec --------------------------------------------------------------------

def test_ivec_column_major():
    assert np.array_equal(ivec([1, 2, 3, 4], 2, 2), [[1, 3], [2, 4]])


def test_ivec_vec_inverse(rng):
    m = rng.normal(size=(3, 4))
    assert np.array_equal(ivec(vec(m), 3, 4), m)


def test_ivec_length_mismatch():
    with pytest.raises(InvalidInputError):
        ivec(np.arange(5.0), 2, 2)


def test_kronecker_identity(rng):
    a = rng.normal(size=(5, 3))
    phi = rng.normal(size=3)
    assert np.allclose(np.kron(phi, np.eye(5)) @ vec(a), a @ phi)


# --- coefficient matrix -----------------------------------------------------------------

def _eye_problem(b_mat, h, a, m=3, n=2):
    return EivProblem(np.zeros(m), h, b_mat, a, np.eye(m), np.eye(len(a)), n)


def test_coefficient_matrix_b_zero():
    h = np.arange(1.0, 7.0)
    prob = _eye_problem(np.zeros((6, 2)), h, [5.0, 7.0])
    assert np.array_equal(build_coefficient_matrix(prob), ivec(h, 3, 2))


def test_coefficient_matrix_identity_structure(rng):
    m = rng.normal(size=(3, 2))
    prob = _eye_problem(np.eye(6), np.zeros(6), vec(m))
    assert np.array_equal(build_coefficient_matrix(prob), m)


def test_coefficient_matrix_repeated_element():
    # 2x2 design (m=3 keeps it redundant): a[0] fills A[0,0] and A[1,1]
    b = np.zeros((6, 2))
    b[0, 0] = 1.0   # A[0,0]
    b[4, 0] = 1.0   # A[1,1]
    b[1, 1] = 1.0   # A[1,0]
    h = np.zeros(6)
    h[2], h[5] = 1.0, 1.0
    prob = _eye_problem(b, h, [2.5, -1.0])
    a_mat = build_coefficient_matrix(prob)
    assert a_mat[0, 0] == a_mat[1, 1] == 2.5
    assert a_mat[1, 0] == -1.0


def test_problem_validation():
    with pytest.raises(InvalidInputError):
        EivProblem(np.zeros(2), np.zeros(4), np.zeros((4, 1)), [0.0], np.eye(2), np.eye(1), 2)
    with pytest.raises(InvalidInputError):
        EivProblem(np.zeros(3), np.zeros(6), np.zeros((6, 1)), [0.0],
                   -np.eye(3), np.eye(1), 2)
    with pytest.raises(InvalidInputError):
        EivProblem(np.zeros(3), np.zeros(5), np.zeros((5, 1)), [0.0], np.eye(3), np.eye(1), 2)


# --- IGG-III weights ---------------------------------------------------------------------

def test_igg3_segments():
    assert np.array_equal(igg3_weights([-1.5, 0.0, 1.2]), [1.0, 1.0, 1.0])
    assert igg3_weights([10.0])[0] == 0.0
    assert igg3_weights([2.0])[0] == pytest.approx(0.1875, abs=1e-15)
    assert igg3_weights([-2.0])[0] == pytest.approx(0.1875, abs=1e-15)


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=60))
def test_robust_weights_in_unit_interval(r):
    w, _ = robust_reweight(r, return_flag=True)
    assert np.all((w >= 0.0) & (w <= 1.0))


def test_robust_reweight_outlier_zeroed(rng):
    r = rng.normal(size=50)
    r[7] = 40.0
    w = robust_reweight(r)
    assert w[7] == 0.0
    assert np.median(w) == 1.0


def test_robust_reweight_zero_mad_flag():
    w, flag = robust_reweight(np.full(8, 0.3), return_flag=True)
    assert flag and np.array_equal(w, np.ones(8))
    with pytest.warns(RuntimeWarning):
        robust_reweight(np.full(8, 0.3))


def test_robust_reweight_rejects_nonfinite():
    with pytest.raises(InvalidInputError):
        robust_reweight([0.0, np.nan, 1.0])


# --- solver --------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_b_zero_equals_weighted_ls(seed):
    rng = np.random.default_rng(seed)
    m, n = int(rng.integers(5, 50)), int(rng.integers(1, 7))
    prob, _ = random_problem(rng, m, n)
    fixed = prob.with_fixed_coefficients()
    sol = solve(fixed)
    ref = wls(build_coefficient_matrix(fixed), prob.p, prob.q_p)
    assert np.allclose(sol.phi_hat, ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max())
    assert sol.converged and sol.iterations == 1
    assert np.allclose(sol.e_a_hat, 0.0)


def test_consistent_noiseless_system(rng):
    prob, phi = random_problem(rng, 12, 3, noise=0.0)
    sol = solve(prob)
    assert sol.converged
    assert np.allclose(sol.phi_hat, phi, atol=1e-9)
    assert np.max(np.abs(sol.e_p_hat)) < 1e-9
    assert np.max(np.abs(sol.e_a_hat)) < 1e-9


def test_isotropic_unstructured_moves_off_ls(rng):
    # i.i.d. unit cofactors: the WTLS estimate is the classical TLS one
    m, n = 8, 2
    a_mat = rng.normal(size=(m, n))
    p = a_mat @ np.array([1.0, -2.0]) + 0.2 * rng.normal(size=m)
    prob = EivProblem(p, np.zeros(m * n), np.eye(m * n), vec(a_mat), np.eye(m), np.eye(m * n),
                      n)
    sol = solve(prob)
    _, _, vt = np.linalg.svd(np.column_stack([a_mat, p]))
    tls = -vt[-1, :n] / vt[-1, n]
    assert np.allclose(sol.phi_hat, tls, atol=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(100 + seed)
    m = 4 + seed
    prob, _ = random_problem(rng, m, 2 + seed % 2, noise=0.1)
    sol = solve(prob)
    x0 = wls(build_coefficient_matrix(prob), prob.p, prob.q_p)
    phi, _, f = oracles.eiv_brute_force(prob.p, prob.h, prob.b_mat, prob.a, prob.q_p,
                                        prob.q_a, prob.n, x0)
    assert np.allclose(sol.phi_hat, phi, atol=1e-6)
    assert objective(prob, sol.phi_hat) == pytest.approx(f, rel=1e-8, abs=1e-14)


def test_objective_monotone(rng):
    for _ in range(10):
        prob, _ = random_problem(rng, 20, 3, noise=0.3)
        h = solve(prob).objective_history
        assert all(b <= a + 1e-12 * max(1.0, abs(a)) for a, b in zip(h, h[1:]))


def test_stationarity_and_constraint(rng):
    prob, _ = random_problem(rng, 15, 3, noise=0.2)
    sol = solve(prob)
    assert sol.converged and sol.final_step_norm < 1e-10
    a_mat = build_coefficient_matrix(prob)
    a_i = a_mat - prob.coefficient_error_matrix(sol.e_a_hat)
    scale = np.linalg.norm(prob.p)
    assert np.max(np.abs(a_i.T @ sol.multipliers)) < 1e-8 * scale
    constraint = prob.p - a_i @ sol.phi_hat - sol.e_p_hat
    assert np.max(np.abs(constraint)) < 1e-8 * scale


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_cofactor_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    prob, _ = random_problem(rng, 10, 2, noise=0.1)
    scaled = EivProblem(prob.p, prob.h, prob.b_mat, prob.a, c * prob.q_p, c * prob.q_a, prob.n)
    assert np.allclose(solve(scaled).phi_hat, solve(prob).phi_hat, rtol=0, atol=1e-10)


def test_sparse_and_dense_agree(rng):
    seed = int(rng.integers(1 << 30))
    dense, _ = random_problem(np.random.default_rng(seed), 12, 3)
    sparse, _ = random_problem(np.random.default_rng(seed), 12, 3, sparse=True)
    assert np.allclose(solve(dense).phi_hat, solve(sparse).phi_hat, atol=1e-12)


def test_deterministic(rng):
    prob, _ = random_problem(rng, 20, 3, noise=0.2)
    a, b = solve(prob, SolverOptions(robust=True)), solve(prob, SolverOptions(robust=True))
    assert np.array_equal(a.phi_hat, b.phi_hat)


def test_robust_downweights_outlier(rng):
    prob, phi = random_problem(rng, 40, 2, noise=0.01)
    p = prob.p.copy()
    p[5] += 5.0
    bad = EivProblem(p, prob.h, prob.b_mat, prob.a, prob.q_p, prob.q_a, prob.n)
    plain = solve(bad)
    robust = solve(bad, SolverOptions(robust=True))
    assert robust.weight_diag[5] == 0.0
    assert np.all((robust.weight_diag >= 0) & (robust.weight_diag <= 1))
    assert np.linalg.norm(robust.phi_hat - phi) < 0.1 * np.linalg.norm(plain.phi_hat - phi)


def test_converged_implies_small_step(rng):
    for _ in range(5):
        prob, _ = random_problem(rng, 10, 2, noise=0.3)
        for robust in (False, True):
            sol = solve(prob, SolverOptions(robust=robust))
            if sol.converged:
                assert sol.final_step_norm < 1e-10


def test_max_iterations_not_an_error(rng):
    prob, _ = random_problem(rng, 10, 2, noise=0.3)
    sol = solve(prob, SolverOptions(max_iterations=1, eps0=1e-300))
    assert not sol.converged and sol.iterations == 1


def test_ill_conditioned_carries_iteration(rng, monkeypatch):
    prob, _ = random_problem(rng, 10, 2)
    original = rwtls._cofactor_c
    calls = {"n": 0}

    def broken(prob_, phi, q_p):
        calls["n"] += 1
        q_c, g = original(prob_, phi, q_p)
        return (-q_c if calls["n"] >= 3 else q_c), g

    monkeypatch.setattr(rwtls, "_cofactor_c", broken)
    with pytest.raises(IllConditionedError) as info:
        solve(prob)
    assert info.value.iteration >= 1


def test_solver_options_validation():
    with pytest.raises(InvalidInputError):
        SolverOptions(eps0=0.0)
    with pytest.raises(InvalidInputError):
        SolverOptions(max_iterations=0)
    with pytest.raises(InvalidInputError):
        SolverOptions(k0=3.0, k1=2.0)


# --- estimator -----------------------------------------------------------------------

def test_estimator_api(rng):
    prob, _ = random_problem(rng, 20, 3, noise=0.05)
    est = RobustWeightedTLS(robust=False)
    assert clone(est).get_params() == est.get_params()
    est.fit(prob)
    assert np.array_equal(est.coef_, solve(prob).phi_hat)
    a_mat = build_coefficient_matrix(prob)
    assert np.allclose(est.predict(a_mat), a_mat @ est.coef_)
    with pytest.raises(InvalidInputError):
        est.predict(np.ones((2, 5)))


def test_estimator_unstructured_is_wls(rng):
    prob, _ = random_problem(rng, 20, 3, noise=0.05)
    est = RobustWeightedTLS(robust=False, structured=False).fit(prob)
    assert np.allclose(est.coef_, wls(build_coefficient_matrix(prob), prob.p, prob.q_p),
                       atol=1e-12)


def test_estimator_requires_fit_and_problem():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        RobustWeightedTLS().predict(np.ones((2, 2)))
    with pytest.raises(InvalidInputError):
        RobustWeightedTLS().fit(np.ones((3, 3)))


def test_robust_reweight_centering(rng):
    r = 5.0 + 0.01 * rng.normal(size=30)
    assert np.all(robust_reweight(r) == 0.0)
    centered = robust_reweight(r, center=True)
    assert np.mean(centered == 1.0) > 0.8
