"""Optimal covariance and the spectral view of the averaged recursion.

With ``Z_n = (theta_n - theta*, theta_bar_n - theta*)`` the pair evolves as
``Z_{n+1} = A_n Z_n + gamma_{n+1} (dM, dM / (n+1))`` where

    A_n = [[I - g L_n, 0], [(I - g L_n) / (n+1), (1 - 1/(n+1)) I]]

and ``L_n`` is the Hessian averaged along the segment from ``theta*`` to
``theta_n``. Rotating by ``Q`` (``Lambda* = Q^T D* Q``) decouples the
coordinates, and the shear built from ``epsilon_mu`` diagonalises each 2x2
block.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss

from .schedule import NotDiagonalizableError, StepSchedule, degenerate_threshold, epsilon_mu
from .sgd import BLOCK, SimulationResult, _normalise_checkpoints, run

_T, _W = leggauss(32)
GL_NODES = 0.5 * (_T + 1.0)
GL_WEIGHTS = 0.5 * _W


@dataclass(frozen=True)
class SpectralData:
    Lambda_star: np.ndarray
    Q: np.ndarray
    D_star: np.ndarray
    S_star: np.ndarray
    Sigma_star: np.ndarray
    trace_sigma: float
    noise_kind: str = "analytic"

    def residuals(self):
        d = self.Q.shape[0]
        orth = np.linalg.norm(self.Q.T @ self.Q - np.eye(d))
        rec = np.linalg.norm(self.Q.T @ np.diag(self.D_star) @ self.Q - self.Lambda_star)
        return {"orthonormality": float(orth),
                "reconstruction": float(rec / np.linalg.norm(self.Lambda_star))}

    def to_dict(self):
        out = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
               for k, v in self.__dict__.items()}
        out["residuals"] = self.residuals()
        return out


def _orthonormal_eigh(M):
    w, V = np.linalg.eigh(M)
    Q = V.T
    if np.linalg.norm(Q @ Q.T - np.eye(M.shape[0])) > 1e-10:
        # near-degenerate clusters can come back slightly skewed
        Qr, Rr = np.linalg.qr(V)
        Qr = Qr * np.sign(np.diag(Rr))
        Q = Qr.T
        w = np.einsum("ij,jk,ik->i", Q, M, Q)
    return w, Q


def compute_sigma_star(problem, rng=None, draws=10**6) -> SpectralData:
    """``Sigma* = H^-1 S* H^-1`` with ``H`` the Hessian and ``S*`` the noise covariance at the minimiser."""
    ts = problem.theta_star
    H = np.asarray(problem.hessian(ts), dtype=float)
    H = 0.5 * (H + H.T)
    w, Q = _orthonormal_eigh(H)
    if w.min() <= 0:
        k = int(np.argmin(w))
        raise ValueError(f"Hessian at the minimiser is not positive definite: eigenvalue {k} = {w[k]:.6g}")
    S = np.asarray(problem.noise_covariance(ts, rng=rng, draws=draws), dtype=float)
    S = 0.5 * (S + S.T)
    Hi_S = np.linalg.solve(H, S)
    Sigma = np.linalg.solve(H, Hi_S.T)
    Sigma = 0.5 * (Sigma + Sigma.T)
    return SpectralData(H, Q, w, S, Sigma, float(np.trace(Sigma)), problem.noise_kind)


# ---------------------------------------------------------------------------
# evolution blocks


@dataclass
class EMuBlock:
    matrix: np.ndarray
    eigenvalues: tuple
    eigenvectors: tuple

    def residual(self):
        return max(float(np.linalg.norm(self.matrix @ u - lam * u))
                   for lam, u in zip(self.eigenvalues, self.eigenvectors))


def e_mu_matrix(sched: StepSchedule, mu: float, n: int) -> EMuBlock:
    """2x2 evolution block for one eigen-direction with curvature ``mu`` at step ``n -> n+1``."""
    g = sched.step(n + 1)
    a = 1.0 - mu * g
    b = 1.0 - 1.0 / (n + 1)
    M = np.array([[a, 0.0], [a / (n + 1), b]])
    eps = epsilon_mu(sched, mu, n)
    return EMuBlock(M, (a, b), (np.array([1.0, eps]), np.array([0.0, 1.0])))


@dataclass
class ANMatrix:
    matrix: np.ndarray
    shear: np.ndarray
    diagonal: np.ndarray
    shear_inv: np.ndarray

    def reconstruct(self):
        return self.shear @ np.diag(self.diagonal) @ self.shear_inv

    def residual(self):
        return float(np.linalg.norm(self.reconstruct() - self.matrix) / np.linalg.norm(self.matrix))


def a_n_matrix(sched: StepSchedule, D_star, n: int) -> ANMatrix:
    """Rotated 2d x 2d evolution matrix and its factorisation ``P diag P^-1``.

    ``P = [[I, 0], [E, I]]`` with ``E = diag(epsilon_{mu_i})``. Raises
    :class:`NotDiagonalizableError` if any direction is degenerate at ``n``.
    """
    D = np.asarray(D_star, dtype=float).reshape(-1)
    d = D.size
    g = sched.step(n + 1)
    top = 1.0 - g * D
    low = 1.0 - 1.0 / (n + 1)
    A = np.zeros((2 * d, 2 * d))
    A[:d, :d] = np.diag(top)
    A[d:, :d] = np.diag(top / (n + 1))
    A[d:, d:] = low * np.eye(d)
    eps = np.array([epsilon_mu(sched, mu, n) for mu in D])
    P = np.eye(2 * d)
    P[d:, :d] = np.diag(eps)
    Pinv = np.eye(2 * d)
    Pinv[d:, :d] = -np.diag(eps)
    return ANMatrix(A, P, np.concatenate([top, np.full(d, low)]), Pinv)


def shear_threshold(sched: StepSchedule, D_star) -> int:
    """First index past which every direction is non-degenerate and ``epsilon < 0``."""
    return max(degenerate_threshold(sched, float(mu)) for mu in np.atleast_1d(D_star))


# ---------------------------------------------------------------------------
# coupled recursion replay


def segment_hessian(problem, e):
    """``int_0^1 D^2 f(theta* + t e) dt`` by 32-node Gauss-Legendre."""
    ts = problem.theta_star
    if getattr(problem, "constant_hessian", False):
        return problem.hessian(ts)
    if hasattr(problem, "hessian_weighted"):
        return problem.hessian_weighted(ts + np.outer(GL_NODES, e), GL_WEIGHTS)
    out = np.zeros((problem.dim, problem.dim))
    for t, w in zip(GL_NODES, GL_WEIGHTS):
        out += w * problem.hessian(ts + t * e)
    return out


@dataclass
class CoupledState:
    n: int
    Z: np.ndarray
    Z_check: np.ndarray
    Z_tilde: np.ndarray


@dataclass
class CoupledTrace:
    states: list
    replay_error: float
    quadrature_residual: float
    check_error: float
    breaches: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.breaches


def coupled_state(n, Z, Q, sched, D_star):
    d = Q.shape[0]
    Zc = np.concatenate([Q @ Z[:d], Q @ Z[d:]])
    try:
        eps = np.array([epsilon_mu(sched, float(mu), int(n)) for mu in D_star])
    except NotDiagonalizableError:
        eps = np.full(d, np.nan)
    Zt = Zc.copy()
    Zt[d:] = Zc[d:] - eps * Zc[:d]
    return CoupledState(int(n), Z, Zc, Zt)


def trace_coupled_recursion(problem, schedule: StepSchedule, theta0, n_max, seed,
                            spectral: SpectralData, checkpoints=None, rtol=1e-10,
                            backend=None) -> CoupledTrace:
    """Replay one run through the coupled 2d recursion and its rotated form.

    The same seed reproduces the noise of :func:`rpavg.sgd.run`. At every
    step the segment-averaged Hessian ``L_n`` is checked against
    ``L_n e_n = grad f(theta_n)``, the rotated recursion (driven by ``D*``
    plus the remainder ``v_n``) is checked against ``Q`` applied to the plain
    one, and at checkpoints the state is compared with the direct run.
    """
    n_max = int(n_max)
    cps = _normalise_checkpoints(checkpoints, n_max)
    ts = problem.theta_star
    d = problem.dim
    Q, D = spectral.Q, spectral.D_star
    Lstar = spectral.Lambda_star
    direct = run(problem, schedule, theta0, n_max, np.random.default_rng(seed), cps,
                 backend=backend)
    rng = np.random.default_rng(seed)
    e = np.array(theta0, dtype=float, ndmin=1) - ts
    ebar = np.zeros(d)
    # replay errors are relative to the state, floored by the initial offset and first step
    scale0 = max(float(np.linalg.norm(e)), schedule.step(1))
    ec = Q @ e
    ebar_c = np.zeros(d)
    states, breaches = [], []
    replay_err = quad_res = check_err = 0.0
    j = 0
    n = 0
    while n < n_max:
        noise = problem.draw_noise(rng, BLOCK)
        for k in range(min(BLOCK, n_max - n)):
            z = tuple(a[k] for a in noise)
            theta = ts + e
            grad = problem.gradient(theta)
            L = segment_hessian(problem, e)
            res = float(np.linalg.norm(L @ e - grad))
            quad_res = max(quad_res, res / (1.0 + np.linalg.norm(e)))
            if res > 1e-8 * (1.0 + np.linalg.norm(e)):
                breaches.append(("quadrature", n, res))
            dM = grad - problem.stochastic_gradient(theta, *z)
            g = schedule.step(n + 1)
            inv = 1.0 / (n + 1)
            # plain recursion
            top = e - g * (L @ e)
            e_new = top + g * dM
            ebar = (1.0 - inv) * ebar + inv * top + g * inv * dM
            # rotated recursion with D* and the remainder term
            v = -g * (Q @ ((L - Lstar) @ e))
            qdm = Q @ dM
            ec_top = (1.0 - g * D) * ec
            ec_new = ec_top + v + g * qdm
            ebar_c = (1.0 - inv) * ebar_c + inv * (ec_top + v) + g * inv * qdm
            e = e_new
            ec = ec_new
            n += 1
            scale = 1.0 + np.linalg.norm(e) + np.linalg.norm(ebar)
            cerr = max(np.linalg.norm(ec - Q @ e), np.linalg.norm(ebar_c - Q @ ebar)) / scale
            check_err = max(check_err, cerr)
            if j < cps.size and n == cps[j]:
                Zd = np.concatenate([direct.theta[j] - ts, direct.theta_bar[j] - ts])
                Z = np.concatenate([e, ebar])
                err = float(np.linalg.norm(Z - Zd) / max(np.linalg.norm(Zd), scale0))
                replay_err = max(replay_err, err)
                if err > rtol:
                    breaches.append(("replay", n, err))
                states.append(coupled_state(n, Z, Q, schedule, D))
                j += 1
    if check_err > 1e-10:
        breaches.append(("rotation", n_max, check_err))
    return CoupledTrace(states, replay_err, quad_res, check_err, breaches)


def coupled_states_from_result(result: SimulationResult, spectral: SpectralData,
                               schedule: StepSchedule):
    """Rotated and sheared snapshots ``(Z_check, Z_tilde)`` of a batch simulation.

    Returns arrays of shape (R, J, 2d); columns at indices where a direction
    is degenerate are NaN. Diverged replications are dropped.
    """
    keep = ~result.diverged
    raw, avg = result.raw[keep], result.avg[keep]
    Q, D = spectral.Q, spectral.D_star
    d = Q.shape[0]
    Zc = np.concatenate([raw @ Q.T, avg @ Q.T], axis=2)
    eps = np.full((result.checkpoints.size, d), np.nan)
    for jj, n in enumerate(result.checkpoints):
        for i, mu in enumerate(D):
            try:
                eps[jj, i] = epsilon_mu(schedule, float(mu), int(n))
            except NotDiagonalizableError:
                pass
    Zt = Zc.copy()
    Zt[:, :, d:] = Zc[:, :, d:] - eps[None] * Zc[:, :, :d]
    return Zc, Zt


@dataclass
class OmegaCurves:
    n: np.ndarray
    omega: np.ndarray
    se: np.ndarray
    n_times_z2: np.ndarray
    n_times_z2_se: np.ndarray
    sup_n_omega: np.ndarray
    z2_limit: float
    replications: int

    def to_csv(self, path=None, header=None):
        buf = io.StringIO()
        for line in header or []:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "i", "omega_hat", "se", "n_times_z2"])
        for jj, n in enumerate(self.n):
            for i in range(self.omega.shape[1]):
                w.writerow([int(n), i, repr(float(self.omega[jj, i])), repr(float(self.se[jj, i])),
                            repr(float(self.n_times_z2[jj]))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def omega_diagnostic(Z_tilde, checkpoints, n0=1, tail_points=5) -> OmegaCurves:
    """Monte Carlo estimates of ``omega_n(i) = E[Zt_i Zt_{d+i}]`` and ``n E|Zt^(2)|^2``.

    ``Z_tilde`` has shape (R, J, 2d); only checkpoints ``>= n0`` are used.
    ``z2_limit`` averages ``n E|Zt^(2)|^2`` over the last ``tail_points``.
    """
    Z_tilde = np.asarray(Z_tilde, dtype=float)
    cps = np.asarray(checkpoints)
    sel = cps >= n0
    Zt = Z_tilde[:, sel]
    n = cps[sel].astype(float)
    R = Zt.shape[0]
    d = Zt.shape[2] // 2
    prod = Zt[:, :, :d] * Zt[:, :, d:]
    omega = prod.mean(axis=0)
    se = prod.std(axis=0, ddof=1) / np.sqrt(R) if R > 1 else np.zeros_like(omega)
    z2 = np.sum(Zt[:, :, d:] ** 2, axis=2)
    nz2 = n * z2.mean(axis=0)
    nz2_se = n * (z2.std(axis=0, ddof=1) / np.sqrt(R) if R > 1 else np.zeros_like(nz2))
    sup = np.max(np.abs(omega) * n[:, None], axis=0)
    tail = nz2[-tail_points:]
    return OmegaCurves(cps[sel], omega, se, nz2, nz2_se, sup, float(tail.mean()), R)
