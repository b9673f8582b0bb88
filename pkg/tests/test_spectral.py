import math

import numpy as np
import pytest

from rpavg.montecarlo import replication_seeds
from rpavg.problems import LeastSquaresProblem, NormalLaw, QuantileProblem
from rpavg.schedule import NotDiagonalizableError, StepSchedule, degenerate_threshold
from rpavg.sgd import checkpoint_grid, simulate
from rpavg.spectral import (GL_NODES, GL_WEIGHTS, a_n_matrix, compute_sigma_star,
                            coupled_state, coupled_states_from_result, e_mu_matrix,
                            omega_diagnostic, segment_hessian, shear_threshold,
                            trace_coupled_recursion)

import oracles


def test_gauss_legendre_nodes():
    assert GL_NODES.size == 32
    assert math.fsum(GL_WEIGHTS) == pytest.approx(1.0, abs=1e-15)
    # exact for polynomials up to degree 63
    assert np.dot(GL_WEIGHTS, GL_NODES ** 63) == pytest.approx(1 / 64, rel=1e-13)


# Sigma*

def test_sigma_star_quantile(quantile):
    sp = compute_sigma_star(quantile)
    ref = oracles.quantile_trace_sigma(0.5, oracles.normal_pdf(0.0))
    assert sp.trace_sigma == pytest.approx(ref, rel=1e-14)
    assert sp.trace_sigma == pytest.approx(math.pi / 2, rel=1e-14)
    # not the displayed alpha(1-alpha)/p(q) constant
    assert abs(sp.trace_sigma - 0.25 / oracles.normal_pdf(0.0)) > 0.9


def test_sigma_star_quantile_asymmetric():
    prob = QuantileProblem(NormalLaw(1.0, 3.0), 0.1)
    sp = compute_sigma_star(prob)
    q = prob.theta_star[0]
    pdf = oracles.normal_pdf((q - 1.0) / 3.0) / 3.0
    assert sp.trace_sigma == pytest.approx(oracles.quantile_trace_sigma(0.1, pdf), rel=1e-12)


def test_sigma_star_identity_hessian():
    S0 = np.array([[1.0, 0.3], [0.3, 2.0]])
    sp = compute_sigma_star(LeastSquaresProblem(np.eye(2), None, S0))
    assert np.allclose(sp.Sigma_star, S0, rtol=0, atol=1e-15)
    assert sp.trace_sigma == pytest.approx(3.0, rel=1e-15)


def test_sigma_star_general_least_squares(least_squares):
    sp = compute_sigma_star(least_squares)
    Hi = np.linalg.inv(least_squares.H)
    assert np.allclose(sp.Sigma_star, Hi @ least_squares.S0 @ Hi, rtol=1e-13)
    assert np.allclose(sp.Sigma_star, sp.Sigma_star.T, rtol=0, atol=0)
    assert np.linalg.eigvalsh(sp.Sigma_star).min() >= 0


def test_sigma_star_logistic_reproducible(logistic_full):
    a = compute_sigma_star(logistic_full, np.random.default_rng(1))
    b = compute_sigma_star(logistic_full, np.random.default_rng(2))
    assert a.noise_kind == "monte-carlo"
    assert abs(a.trace_sigma / b.trace_sigma - 1) < 0.01
    # well-specified model: Sigma* ~ H^-1
    assert a.trace_sigma == pytest.approx(np.trace(np.linalg.inv(a.Lambda_star)), rel=0.01)


def test_spectral_invariants(quantile, least_squares, logistic_small):
    for prob in (quantile, least_squares, logistic_small):
        sp = compute_sigma_star(prob, np.random.default_rng(0), draws=10**5)
        res = sp.residuals()
        assert res["orthonormality"] <= 1e-10
        assert res["reconstruction"] <= 1e-10
        assert np.all(sp.D_star > 0)
        assert sp.trace_sigma == pytest.approx(np.trace(sp.Sigma_star))


def test_near_degenerate_eigenvalues_stay_orthonormal():
    rng = np.random.default_rng(3)
    V, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    H = V @ np.diag([1.0, 1.0 + 1e-13, 1.0 + 2e-13, 5.0]) @ V.T
    H = 0.5 * (H + H.T)
    sp = compute_sigma_star(LeastSquaresProblem(H))
    assert sp.residuals()["orthonormality"] <= 1e-10
    assert sp.residuals()["reconstruction"] <= 1e-10


def test_non_pd_hessian_named():
    class Flat(LeastSquaresProblem):
        def hessian(self, theta):
            return np.diag([1.0, -0.5])
    prob = Flat(np.eye(2))
    with pytest.raises(ValueError, match="eigenvalue 0 = -0.5"):
        compute_sigma_star(prob)


# E_mu and A_n

def test_e_mu_example():
    beta = 0.5
    s = StepSchedule(0.1 * 4 ** beta, beta)
    blk = e_mu_matrix(s, 1.0, 3)
    assert np.allclose(blk.matrix, [[0.9, 0.0], [0.225, 0.75]], rtol=0, atol=1e-15)
    assert blk.eigenvalues[0] == pytest.approx(0.9) and blk.eigenvalues[1] == 0.75
    assert np.allclose(blk.eigenvectors[0], [1.0, 1.5], rtol=1e-14)
    assert blk.residual() <= 1e-15


def test_e_mu_degenerate():
    s = StepSchedule(4 ** 0.5 / 4, 0.5)
    with pytest.raises(NotDiagonalizableError):
        e_mu_matrix(s, 1.0, 3)


def test_e_mu_random_residuals():
    rng = np.random.default_rng(4)
    worst = 0.0
    count = 0
    while count < 1000:
        s = StepSchedule(rng.uniform(0.1, 5), rng.uniform(0.51, 0.99))
        mu = rng.uniform(0.05, 5)
        n = int(10 ** rng.uniform(0, 6))
        n0 = degenerate_threshold(s, mu)
        if abs(n + 1 - n0) <= 2 or abs(n + 1 - (n0 - 1)) <= 2:
            continue  # close to the degenerate index
        worst = max(worst, e_mu_matrix(s, mu, n).residual())
        count += 1
    assert worst <= 1e-12


def test_a_n_one_dimensional_reduces_to_e_mu():
    s = StepSchedule(1.3, 0.75)
    for n in (50, 1000):
        A = a_n_matrix(s, [0.7], n)
        assert np.array_equal(A.matrix, e_mu_matrix(s, 0.7, n).matrix)


def test_a_n_reconstruction_and_blocks():
    rng = np.random.default_rng(5)
    for _ in range(100):
        D = rng.uniform(0.1, 4, size=rng.integers(1, 6))
        s = StepSchedule(rng.uniform(0.2, 3), rng.uniform(0.55, 0.95))
        n = 2 * shear_threshold(s, D) + int(rng.integers(0, 10**5))
        A = a_n_matrix(s, D, n)
        assert A.residual() <= 1e-12
        d = D.size
        assert np.array_equal(A.matrix[d:, d:], (1 - 1 / (n + 1)) * np.eye(d))
        assert np.allclose(A.shear @ A.shear_inv, np.eye(2 * d), rtol=0, atol=0)


def test_a_n_reconstruction_degrades_next_to_threshold():
    # |eps| blows up just past n0 and the residual grows with it
    s = StepSchedule(0.2, 0.9)
    n0 = shear_threshold(s, [1.3])
    A = a_n_matrix(s, [1.3], n0)
    eps = abs(A.shear[1, 0])
    assert eps > 1e6
    assert 1e-12 < A.residual() <= 1e-15 * eps


def test_a_n_degenerate_index_flagged():
    s = StepSchedule(4 ** 0.5 / 4, 0.5)
    with pytest.raises(NotDiagonalizableError):
        a_n_matrix(s, [5.0, 1.0], 3)


# replay

def test_segment_hessian(quantile, least_squares, logistic_small):
    rng = np.random.default_rng(6)
    assert np.array_equal(segment_hessian(least_squares, rng.normal(size=2)), least_squares.H)
    for prob in (quantile, logistic_small):
        e = rng.normal(size=prob.dim)
        L = segment_hessian(prob, e)
        assert np.linalg.norm(L @ e - prob.gradient(prob.theta_star + e)) <= 1e-12


def test_replay_least_squares(least_squares):
    sched = StepSchedule(0.5, 0.75)
    sp = compute_sigma_star(least_squares)
    tr = trace_coupled_recursion(least_squares, sched, [0.0, 0.0], 3000, 11, sp)
    assert tr.ok, tr.breaches
    assert tr.replay_error <= 1e-10
    assert tr.quadrature_residual <= 1e-14


def test_replay_quantile(quantile):
    sched = StepSchedule(2.0, 0.75)
    sp = compute_sigma_star(quantile)
    tr = trace_coupled_recursion(quantile, sched, [1.0], 5000, 12, sp)
    assert tr.ok, tr.breaches
    assert tr.replay_error <= 1e-10
    assert tr.quadrature_residual <= 1e-8


def test_replay_logistic_small(logistic_small):
    sched = StepSchedule(4.0, 0.75)
    sp = compute_sigma_star(logistic_small, np.random.default_rng(0), draws=10**5)
    tr = trace_coupled_recursion(logistic_small, sched, [0.0, 0.0], 500, 13, sp)
    assert tr.ok, tr.breaches


def test_diagonal_hessian_leaves_coordinates():
    prob = LeastSquaresProblem(np.diag([1.0, 3.0]))
    sp = compute_sigma_star(prob)
    assert np.array_equal(sp.Q, np.eye(2))
    tr = trace_coupled_recursion(prob, StepSchedule(0.3, 0.75), [1.0, 1.0], 200, 0, sp)
    for st in tr.states:
        assert np.array_equal(st.Z_check, st.Z)


def test_coupled_state_invariants(least_squares):
    sp = compute_sigma_star(least_squares)
    sched = StepSchedule(0.5, 0.75)
    Z = np.array([0.3, -0.2, 0.1, 0.05])
    n = shear_threshold(sched, sp.D_star) + 10
    st = coupled_state(n, Z, sp.Q, sched, sp.D_star)
    Q2 = np.kron(np.eye(2), sp.Q)
    assert np.array_equal(st.Z_check, np.concatenate([sp.Q @ Z[:2], sp.Q @ Z[2:]]))
    assert np.allclose(st.Z_check, Q2 @ Z, rtol=0, atol=1e-16)
    assert np.array_equal(st.Z_tilde[:2], st.Z_check[:2])


# omega diagnostics

def test_omega_zero_noise_single_trajectory():
    prob = LeastSquaresProblem(np.diag([1.0, 2.0]), None, np.zeros((2, 2)))
    sched = StepSchedule(0.5, 0.75)
    sp = compute_sigma_star(prob)
    res = simulate(prob, sched, [1.0, -1.0], 2000, [0])
    Zc, Zt = coupled_states_from_result(res, sp, sched)
    n0 = shear_threshold(sched, sp.D_star)
    om = omega_diagnostic(Zt, res.checkpoints, n0)
    sel = res.checkpoints >= n0
    assert np.array_equal(om.omega, Zt[0, sel, :2] * Zt[0, sel, 2:])
    assert np.all(om.se == 0)


def test_omega_least_squares_bounded(least_squares):
    sched = StepSchedule(0.5, 0.75)
    sp = compute_sigma_star(least_squares)
    cps = checkpoint_grid(10**4, 10)
    res = simulate(least_squares, sched, [0.0, 0.0], 10**4, replication_seeds(1, 1000), cps)
    _, Zt = coupled_states_from_result(res, sp, sched)
    n0 = shear_threshold(sched, sp.D_star)
    om = omega_diagnostic(Zt, cps, n0)
    assert om.replications == 1000
    assert np.all(np.isfinite(om.sup_n_omega))
    # n |omega_n| does not grow across the last decade
    tail = np.abs(om.omega[om.n >= 1000]) * om.n[om.n >= 1000, None]
    head = np.abs(om.omega[om.n < 1000]) * om.n[om.n < 1000, None]
    assert np.all(tail.max(axis=0) <= 3 * head.max(axis=0) + 1e-12)


@pytest.mark.slow
def test_omega_quantile_second_block_matches_trace(quantile):
    sched = StepSchedule(2.0, 0.75)
    sp = compute_sigma_star(quantile)
    cps = checkpoint_grid(10**5, 10)
    res = simulate(quantile, sched, [0.0], 10**5, replication_seeds(7, 1000), cps)
    _, Zt = coupled_states_from_result(res, sp, sched)
    om = omega_diagnostic(Zt, cps, shear_threshold(sched, sp.D_star))
    assert om.n_times_z2[-1] == pytest.approx(sp.trace_sigma, rel=0.15)


def test_omega_csv_layout(least_squares):
    sched = StepSchedule(0.5, 0.75)
    sp = compute_sigma_star(least_squares)
    res = simulate(least_squares, sched, [0.0, 0.0], 1000, range(5), [100, 1000])
    _, Zt = coupled_states_from_result(res, sp, sched)
    text = omega_diagnostic(Zt, res.checkpoints, 1, tail_points=1).to_csv(header=["x"])
    lines = text.splitlines()
    assert lines[:2] == ["# x", "n,i,omega_hat,se,n_times_z2"]
    assert len(lines) == 2 + 2 * 2
