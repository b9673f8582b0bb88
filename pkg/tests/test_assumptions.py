import json
import math

import numpy as np
import pytest

from rpavg.assumptions import (PhiFunction, RemovableSingularity, check_h_kl, check_h_phi,
                               check_noise_moments, descent_diagnostic, descent_ratio,
                               desingularize, lyapunov_gradient, lyapunov_hessian, lyapunov_value,
                               verify_growth_by_flow)
from rpavg.problems import LeastSquaresProblem, LogGrowthProblem
from rpavg.schedule import StepSchedule
from rpavg.sgd import checkpoint_grid, simulate

import oracles


@pytest.fixture(scope="module")
def square():
    # f(x) = x^2
    return LeastSquaresProblem(np.array([[2.0]]))


# phi

def test_phi_family():
    for r in (0.0, 0.1, 0.25, 0.4):
        phi = PhiFunction(r)
        assert phi(0.0) == 1.0
        t = np.linspace(0, 100, 1001)
        assert np.all(np.diff(phi(t)) >= 0)
    assert np.all(PhiFunction()(np.array([0.0, 5.0])) == 1.0)
    assert PhiFunction(0.5).constant
    with pytest.raises(ValueError):
        PhiFunction(0.7)


def test_phi_derivatives_match_differences():
    t = np.linspace(0.1, 20, 50)
    h = 1e-5
    for r in (0.0, 0.2, 0.45):
        phi = PhiFunction(r)
        assert np.allclose(phi.d1(t), (phi(t + h) - phi(t - h)) / (2 * h), rtol=1e-7)
        assert np.allclose(phi.d2(t), (phi.d1(t + h) - phi.d1(t - h)) / (2 * h), rtol=1e-6, atol=1e-12)


def test_phi_subadditivity():
    rng = np.random.default_rng(0)
    c0 = PhiFunction(0.0).subadditivity_constant(rng, 10**4)
    assert c0 <= 1e-12
    for r in (0.1, 0.3):
        a = PhiFunction(r).subadditivity_constant(np.random.default_rng(1), 10**4)
        b = PhiFunction(r).subadditivity_constant(np.random.default_rng(2), 10**5)
        assert math.isfinite(a) and math.isfinite(b)
        assert abs(a - b) <= 0.01 * max(1.0, abs(b))


def test_phi_concavity_gap_for_r0():
    phi = PhiFunction(0.0)
    grid = np.logspace(-2, 6, 2000)
    # phi'' is positive everywhere for r = 0 ...
    assert np.all(phi.d2(grid) > 0)
    # ... so only the relaxed condition phi'' <= 1e-6/(1+t) settles
    onset = phi.concavity_onset(grid)
    assert 100 < onset < 1e4
    assert phi.concavity_onset(grid, slack=lambda t: 0 * t) == math.inf
    # for r > 0 the literal condition holds past a finite point
    assert PhiFunction(0.25).concavity_onset(grid, slack=lambda t: 0 * t) < 10


# Lyapunov function

def test_lyapunov_examples(square):
    assert lyapunov_value(square, PhiFunction(), 1, [2.0]) == pytest.approx(4 * math.e, rel=1e-14)
    assert lyapunov_value(square, PhiFunction(0.0), 1, [1.0]) == pytest.approx(math.exp(math.sqrt(2)), rel=1e-14)
    for p in (1, 2, 3.5):
        assert lyapunov_value(square, PhiFunction(0.0), p, [0.0]) == 0.0
    with pytest.raises(ValueError):
        lyapunov_value(square, PhiFunction(), 0.5, [1.0])


def test_lyapunov_gradient_hand_algebra(square):
    # phi = 1, p = 1: V = e x^2, grad V = 2 e x
    for x in (-1.5, 0.3, 2.0):
        assert lyapunov_gradient(square, PhiFunction(), 1, [x])[0] == pytest.approx(2 * math.e * x, rel=1e-14)
        assert lyapunov_hessian(square, PhiFunction(), 1, [x])[0, 0] == pytest.approx(2 * math.e, rel=1e-13)


def test_lyapunov_singularity(square):
    with pytest.raises(RemovableSingularity):
        lyapunov_gradient(square, PhiFunction(0.0), 1, [1e-9])
    with pytest.raises(RemovableSingularity):
        lyapunov_hessian(square, PhiFunction(0.0), 1, [0.0])


def _fd_grad(fun, x, h):
    return np.array([(fun(x + h * e) - fun(x - h * e)) / (2 * h) for e in np.eye(x.size)])


@pytest.mark.parametrize("which,r,p", [("quantile", 0.0, 1), ("quantile", 0.0, 2),
                                       ("least_squares", None, 2), ("least_squares", 0.25, 1),
                                       ("logistic_small", 0.0, 1)])
def test_lyapunov_derivatives_match_differences(which, r, p, request):
    prob = request.getfixturevalue(which)
    phi = PhiFunction(r)
    rng = np.random.default_rng(3)
    count = 0
    while count < 50:
        x = prob.theta_star + rng.normal(scale=1.5, size=prob.dim)
        if np.linalg.norm(x - prob.theta_star) <= 1e-3:
            continue
        count += 1
        h = 1e-5 * max(1.0, np.linalg.norm(x))
        V = lambda y: lyapunov_value(prob, phi, p, y)
        g = lyapunov_gradient(prob, phi, p, x)
        fd = _fd_grad(V, x, h)
        assert np.linalg.norm(fd - g) <= 1e-5 * np.linalg.norm(g)
        H = lyapunov_hessian(prob, phi, p, x)
        fdH = np.column_stack([(lyapunov_gradient(prob, phi, p, x + h * e)
                                - lyapunov_gradient(prob, phi, p, x - h * e)) / (2 * h)
                               for e in np.eye(prob.dim)])
        assert np.linalg.norm(fdH - H) <= 1e-5 * np.linalg.norm(H)


def test_descent_direction_positive(quantile, least_squares):
    rng = np.random.default_rng(4)
    for prob, phi in ((quantile, PhiFunction(0.0)), (least_squares, PhiFunction())):
        assert check_h_phi(prob, phi, half_width=5, grid=101).passed
        xs = prob.theta_star + rng.uniform(-10, 10, size=(500, prob.dim))
        vals = [descent_ratio(prob, phi, 2, x) for x in xs]
        assert min(vals) > 0
        for x in xs[:5]:
            g = lyapunov_gradient(prob, phi, 2, x)
            ref = float(g @ prob.gradient(x)) / lyapunov_value(prob, phi, 2, x)
            assert descent_ratio(prob, phi, 2, x) == pytest.approx(ref, rel=1e-12)


# H_phi

def test_h_phi_least_squares_constant():
    prob = LeastSquaresProblem(np.eye(1))
    rep = check_h_phi(prob, PhiFunction())
    assert rep.passed
    assert rep.m_hat == pytest.approx(2.0, rel=1e-12)
    assert rep.M_hat == pytest.approx(2.0, rel=1e-12)


def test_h_phi_quantile(quantile):
    rep = check_h_phi(quantile, PhiFunction(0.0), half_width=10)
    assert rep.passed
    assert 0 < rep.m_hat <= rep.M_hat < math.inf
    assert rep.violations == []
    assert rep.grid["exclude"] == 1e-6


def test_h_phi_log_growth_violates():
    rep = check_h_phi(LogGrowthProblem(1), PhiFunction(0.0), half_width=100)
    assert not rep.passed
    far = [abs(v[0]) for v in rep.violations]
    assert min(far) > 5
    data = json.loads(rep.to_json())
    assert data["checker"] == "h_phi" and data["passed"] is False


# H_KL

def test_h_kl_logistic(logistic_full):
    rep = check_h_kl(logistic_full, 0.0)
    assert rep.passed
    assert rep.directions >= 64
    assert rep.liminf > 0


def test_h_kl_quantile(quantile):
    rep = check_h_kl(quantile, 0.0)
    assert rep.passed
    assert rep.liminf == pytest.approx(0.5, abs=1e-3)
    # alpha != 1/2: the smaller slope wins
    from rpavg.problems import NormalLaw, QuantileProblem
    rep = check_h_kl(QuantileProblem(NormalLaw(), 0.2), 0.0)
    assert rep.liminf == pytest.approx(0.2, abs=1e-3)


def test_h_kl_least_squares():
    # f^-1/2 |grad f| = sqrt(2) |He| / sqrt(e^T H e), minimised along the smallest eigenvector
    H = np.diag([0.5, 3.0])
    rep = check_h_kl(LeastSquaresProblem(H), 0.5)
    assert rep.passed
    assert rep.liminf == pytest.approx(math.sqrt(2) * math.sqrt(0.5), rel=1e-9)


def test_h_kl_log_growth_fails():
    rep = check_h_kl(LogGrowthProblem(2), 0.0)
    assert not rep.passed
    assert rep.slope < -0.5


def test_h_kl_needs_three_radii(quantile):
    with pytest.raises(ValueError):
        check_h_kl(quantile, 0.0, ray_radii=(10, 20))
    with pytest.raises(ValueError):
        check_h_kl(quantile, 0.0, ray_radii=(10, 40, 20))


# noise moments

def test_moments_quantile_bounded(quantile):
    phi = PhiFunction(0.0)
    u = (0.1, 1.0, 10.0)
    rep = check_noise_moments(quantile, phi, 1, u, draws=10**4)
    assert rep.passed
    for row in rep.table:
        for val, uu in zip(row, u):
            assert val <= math.exp(float(phi(uu))) * (1 + 1e-12)


def test_moments_logistic_bounded(logistic_small):
    phi = PhiFunction(0.0)
    u, p, R = (0.1, 1.0), 2, logistic_small.radius
    rep = check_noise_moments(logistic_small, phi, p, u, draws=10**4)
    assert rep.passed
    for row in rep.table:
        for val, uu in zip(row, u):
            # |dM| <= |grad f| + |Lambda| <= 2R
            assert val <= (2 * R) ** (2 * p + 2) * math.exp(float(phi(uu * 4 * R * R)))


def test_moments_gaussian_formula():
    prob = LeastSquaresProblem(np.eye(1))
    rep = check_noise_moments(prob, PhiFunction(), 2, (1.0,), draws=10**6, thetas=[[0.0]],
                              rng=np.random.default_rng(5))
    expected = oracles.gaussian_abs_moment(6) * math.e
    assert rep.table[0][0] == pytest.approx(expected, rel=0.05)


def test_moments_heavy_tail_flagged():
    prob = LeastSquaresProblem(np.eye(1), S0=np.array([[100.0]]))
    rep = check_noise_moments(prob, PhiFunction(0.0), 1, (10.0,), draws=10**4)
    assert rep.overflow and not rep.passed


def test_moments_need_draws(quantile):
    with pytest.raises(ValueError):
        check_noise_moments(quantile, PhiFunction(0.0), 1, draws=5000)


# descent diagnostic

def test_descent_quantile_bounded(quantile):
    sched = StepSchedule(1.0, 0.75)
    res = simulate(quantile, sched, [2.0], 10**4, range(500), checkpoint_grid(10**4, 8))
    rep = descent_diagnostic(res, quantile, PhiFunction(0.0), 1, sched)
    assert rep.passed
    assert rep.offending is None


def test_descent_zero_noise_monotone():
    prob = LeastSquaresProblem(np.eye(2), S0=np.zeros((2, 2)))
    sched = StepSchedule(0.5, 0.75)
    res = simulate(prob, sched, [3.0, -1.0], 5000, range(500), checkpoint_grid(5000, 8))
    rep = descent_diagnostic(res, prob, PhiFunction(), 2, sched)
    assert rep.monotone_after_n0
    assert rep.c1_hat > 0


def test_descent_least_squares_gaussian(least_squares):
    sched = StepSchedule(0.5, 0.75)
    res = simulate(least_squares, sched, [0.0, 0.0], 10**4, range(500), checkpoint_grid(10**4, 8))
    rep = descent_diagnostic(res, least_squares, PhiFunction(), 2, sched)
    assert rep.passed
    assert all(math.isfinite(x) for x in rep.ratio)


def test_descent_flags_unbounded_ratio():
    # gamma_n^p is the wrong scale when the iterate cannot move: zero noise, huge start, tiny steps
    prob = LeastSquaresProblem(np.eye(1), S0=np.zeros((1, 1)))
    sched = StepSchedule(1e-6, 0.75)
    res = simulate(prob, sched, [5.0], 10**4, range(3), checkpoint_grid(10**4, 8))
    with pytest.warns(RuntimeWarning):
        rep = descent_diagnostic(res, prob, PhiFunction(), 1, sched)
    assert not rep.passed
    assert rep.offending is not None


# gradient flow

def test_desingularize():
    assert desingularize(4.0, 0.5) == 4.0
    assert desingularize(3.0, 0.0) == 3.0


def test_flow_quadratic_equality_case():
    prob = LeastSquaresProblem(np.eye(1))
    cert = verify_growth_by_flow(prob, 0.5, [[3.0], [-0.7]], math.sqrt(2))
    assert cert.status == "certified"
    for path in cert.paths:
        # f(x) = x^2/2 equals the bound exactly; the flow is a straight segment of length |x|
        assert abs(path.margin) <= 1e-6
        assert path.length == pytest.approx(abs(path.start[0]), rel=1e-5)
        assert path.arc_monotone


def test_flow_start_at_minimiser(quantile):
    cert = verify_growth_by_flow(quantile, 0.0, [[0.0]], 0.45)
    assert cert.passed
    assert cert.lengths == [0.0]


def test_flow_quantile_far_start(quantile):
    cert = verify_growth_by_flow(quantile, 0.0, [[20.0], [-20.0]], 0.45)
    assert cert.status == "certified"
    assert min(cert.margins) > 0.5
    assert all(p.chain_min >= -1e-6 for p in cert.paths)


def test_flow_two_dimensional_logistic(logistic_small):
    rep = check_h_kl(logistic_small, 0.0)
    m = 0.9 * rep.liminf
    starts = [logistic_small.theta_star + 30 * np.array([math.cos(a), math.sin(a)])
              for a in (0.3, 2.0, 4.0)]
    cert = verify_growth_by_flow(logistic_small, 0.0, starts, m, ode_tolerance=1e-4)
    assert cert.status == "certified"
    assert all(p.arc_monotone for p in cert.paths)


def test_flow_budget_gives_inconclusive(quantile):
    cert = verify_growth_by_flow(quantile, 0.0, [[5.0]], 0.45, max_steps=10)
    assert cert.status == "inconclusive"
    assert not cert.passed
    assert json.loads(cert.to_json())["status"] == "inconclusive"
