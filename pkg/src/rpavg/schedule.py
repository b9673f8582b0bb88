"""Polynomial step schedules and the deterministic sequence checks built on them.

The step at index ``n`` is ``gamma * n**(-beta)``. Besides the schedule itself
this module holds the shear coefficient ``epsilon_mu`` of the 2x2 evolution
block of the averaged recursion and verifiers for three elementary sequence
lemmas (increment decay of ``epsilon_mu``, an ``O(1/n)`` linear recursion and
the ``V/n + C n^-a`` recursion).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._backend import core


class NotDiagonalizableError(ValueError):
    """Raised when ``1 - mu * gamma_{n+1} * (n+1)`` vanishes.

    At that index the 2x2 evolution block has a double eigenvalue and no
    eigenbasis; scans treat it as a skip rather than a failure.
    """

    def __init__(self, mu, n):
        super().__init__(f"evolution block not diagonalizable at mu={mu}, n={n}")
        self.mu = mu
        self.n = n


@dataclass(frozen=True)
class StepSchedule:
    gamma: float
    beta: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not 0 < self.beta < 1:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")

    def step(self, n):
        return step(self, n)

    def steps(self, start, stop):
        """Steps for the integer indices ``start .. stop - 1`` as an array."""
        k = np.arange(start, stop, dtype=np.float64)
        if start < 1:
            raise ValueError("step indices start at 1")
        return self.gamma * k ** (-self.beta)

    def cumulative(self, n):
        return cumulative(self, n)


@dataclass(frozen=True)
class RateExponent:
    beta: float
    r_beta: float


def step(sched: StepSchedule, n) -> float:
    if n < 1:
        raise ValueError(f"step index must be >= 1, got {n}")
    # same array pow as StepSchedule.steps, which can differ from libm pow by an ulp
    return float((sched.gamma * np.array([n], dtype=np.float64) ** (-sched.beta))[0])


def cumulative(sched: StepSchedule, n: int) -> float:
    """Sum of the first ``n`` steps, accumulated with compensation."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return 0.0
    return float(core.compensated_cumsum(sched.steps(1, n + 1))[-1])


def cumulative_all(sched: StepSchedule, n: int) -> np.ndarray:
    """Array ``[Gamma_1, ..., Gamma_n]``."""
    return np.asarray(core.compensated_cumsum(sched.steps(1, n + 1)))


def rate_exponent(beta: float) -> RateExponent:
    """Second-order exponent ``min(beta + 1/2, 2 - beta)`` of the averaged MSE."""
    if not 0.5 < beta < 1:
        raise ValueError(f"rate exponent needs beta in (1/2, 1), got {beta}")
    return RateExponent(beta, min(beta + 0.5, 2.0 - beta))


def epsilon_mu(sched: StepSchedule, mu: float, n: int, rtol: float = 1e-12) -> float:
    """Shear coefficient of the step-``n`` evolution block.

    Returns ``(1 - mu g) / (1 - mu g (n+1))`` with ``g`` the step at index
    ``n + 1``; this is the second coordinate of the eigenvector ``(1, eps)``
    attached to the eigenvalue ``1 - mu g``.
    """
    g = step(sched, n + 1)
    den = 1.0 - mu * g * (n + 1)
    if abs(den) <= rtol * (1.0 + mu * g * (n + 1)):
        raise NotDiagonalizableError(mu, n)
    return (1.0 - mu * g) / den


def degenerate_threshold(sched: StepSchedule, mu: float) -> int:
    """Smallest ``n`` with ``mu * gamma_n * n > 1``.

    ``mu * gamma * n**(1-beta)`` increases in ``n``, so every later index is
    past the degenerate point as well.
    """
    if mu <= 0:
        raise ValueError("mu must be positive")
    est = (1.0 / (mu * sched.gamma)) ** (1.0 / (1.0 - sched.beta))
    if est > 2.0 ** 52:
        # integer refinement is meaningless below float resolution
        return int(math.ceil(est))
    n = max(1, int(math.floor(est)) - 1)
    while mu * step(sched, n) * n <= 1.0:
        n += 1
    while n > 1 and mu * step(sched, n - 1) * (n - 1) > 1.0:
        n -= 1
    return n


def eps_increment(sched: StepSchedule, mu: float, n):
    """``|eps_{mu,n} - eps_{mu,n+1}|`` without cancellation, ``n`` real and past the threshold.

    Uses the factored difference
    ``mu [(g_{n+1} - g_n) + (n g_n - (n+1) g_{n+1}) + mu g_n g_{n+1}] / (den_n den_{n+1})``
    with the increments of ``n**-beta`` and ``n**(1-beta)`` written through
    ``expm1``/``log1p`` so that ``n`` may be far beyond 2**53.
    """
    n = np.asarray(n, dtype=np.float64)
    g, b = sched.gamma, sched.beta
    lp = np.log1p(1.0 / n)
    gn = g * n ** (-b)
    gn1 = gn * np.exp(-b * lp)
    dg = gn * np.expm1(-b * lp)                      # g_{n+1} - g_n
    dng = -g * n ** (1.0 - b) * np.expm1((1.0 - b) * lp)  # n g_n - (n+1) g_{n+1}
    num = mu * (dg + dng + mu * gn * gn1)
    den0 = 1.0 - mu * g * n ** (1.0 - b)
    den1 = 1.0 - mu * g * n ** (1.0 - b) * np.exp((1.0 - b) * lp)
    return np.abs(num / (den0 * den1))


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    residual: float
    n_lo: float
    n_hi: float
    points: int


def geometric_grid(lo, hi, per_decade=40, integer=False):
    decades = math.log10(hi) - math.log10(lo)
    count = max(2, int(round(decades * per_decade)) + 1)
    grid = np.logspace(math.log10(lo), math.log10(hi), count)
    if integer:
        grid = np.unique(np.round(grid).astype(np.int64))
    return grid


def _ols(x, y):
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = float(np.linalg.norm(A @ coef - y))
    return float(coef[0]), float(coef[1]), res


def asymptotic_window(sched: StepSchedule, mu: float, reach: float = 200.0, decades: float = 4.0):
    """Window ``[n_lo, n_lo * 10**decades]`` with ``mu * gamma_n * n >= reach`` on it.

    The local slope of the increment sequence deviates from ``beta - 2`` by
    roughly ``2 (1 - beta) / (mu gamma_n n - 1)``, so the window has to start
    well past the degenerate index for a tight fit.
    """
    n_lo = (reach / (mu * sched.gamma)) ** (1.0 / (1.0 - sched.beta))
    n_lo = max(n_lo, 10.0)
    return n_lo, n_lo * 10.0 ** decades


def verify_eps_increment_decay(sched: StepSchedule, mu: float, n_range=None,
                               per_decade: int | None = 40) -> SlopeFit:
    """Log-log slope of ``n -> |eps_{mu,n} - eps_{mu,n+1}|``; expected ``beta - 2``.

    ``n_range`` defaults to :func:`asymptotic_window` and is filled with a
    geometric grid. With ``per_decade=None`` only the two endpoints are used,
    which gives the exact difference quotient.
    """
    if n_range is None:
        n_range = asymptotic_window(sched, mu)
    lo, hi = n_range
    n0 = degenerate_threshold(sched, mu)
    if lo < n0:
        raise ValueError(f"range starts at {lo}, before the degenerate threshold n0={n0}")
    if per_decade is None:
        ns = np.array([lo, hi], dtype=float)
    else:
        ns = geometric_grid(lo, hi, per_decade)
    d = eps_increment(sched, mu, ns)
    slope, intercept, res = _ols(np.log(ns), np.log(d))
    return SlopeFit(slope, intercept, res, float(lo), float(hi), len(ns))


def direct_eps_increments(sched: StepSchedule, mu: float, ns) -> np.ndarray:
    """Naive ``|eps_{mu,n} - eps_{mu,n+1}|`` from two calls to :func:`epsilon_mu`.

    Loses digits to cancellation for large ``n``; used as an independent
    check of :func:`eps_increment` on moderate ranges.
    """
    return np.array([abs(epsilon_mu(sched, mu, int(n) - 1) - epsilon_mu(sched, mu, int(n)))
                     for n in ns])


@dataclass
class ForcedRecursionResult:
    n: np.ndarray
    u: np.ndarray
    sup_nu: float
    liminf_nu: float


def iterate_lemma_a3(sched: StepSchedule, mu: float, beta_seq, u0: float, n0: int,
                     n_max: int) -> ForcedRecursionResult:
    """Iterate ``u_{n+1} = (1 - gamma_{n+1} mu) n/(n+1) u_n + beta_{n+1}`` from ``u_{n0} = u0``.

    ``beta_seq`` maps an integer array of indices to the forcing terms.
    The reported liminf is the minimum of ``n u_n`` over the last decade and
    is descriptive only.
    """
    if mu * step(sched, n0) >= 1:
        raise ValueError("need mu * gamma_{n0} < 1")
    idx = np.arange(n0, n_max, dtype=np.int64)          # n
    nxt = idx + 1
    a = (1.0 - sched.gamma * nxt.astype(float) ** (-sched.beta) * mu) * (idx / nxt)
    b = np.asarray(beta_seq(nxt), dtype=np.float64)
    u = np.asarray(core.affine_recurrence(np.ascontiguousarray(a), np.ascontiguousarray(b), u0))
    n = np.arange(n0, n_max + 1)
    nu = n * u
    tail = n >= max(n0, n_max // 10)
    return ForcedRecursionResult(n, u, float(nu.max()), float(nu[tail].min()))


def forced_recursion_closed_form(sched: StepSchedule, mu: float, u0: float, n0: int, n_max: int):
    """Unforced solution ``u_n = u0 (n0 / n) prod_{j=n0+1}^{n} (1 - mu gamma_j)``."""
    j = np.arange(n0 + 1, n_max + 1, dtype=float)
    logs = np.concatenate([[0.0], np.cumsum(np.log1p(-mu * sched.gamma * j ** (-sched.beta)))])
    n = np.arange(n0, n_max + 1, dtype=float)
    return u0 * (n0 / n) * np.exp(logs)


@dataclass
class PowerRecursionResult:
    n: np.ndarray
    u: np.ndarray
    exponent: float
    c_star: float
    argmax: int


def verify_lemma_a4(V: float, cbar: float, r: float, q: float, n_max: int) -> PowerRecursionResult:
    """Run the extremal recursion with equality and return the smallest admissible ``C``.

    ``u_{n+1} = u_n (1 - 1/(n+1))^2 (1 + 2 n^-r) + V/(n+1)^2 + cbar n^-q``,
    ``u_1 = V + cbar``; ``C* = max_n (u_n - V/n) n^{min(r, q-1)}``.
    ``r = inf`` drops the ``2 n^-r`` factor.
    """
    if r < 1:
        raise ValueError(f"need r >= 1, got {r}")
    if q < 2:
        raise ValueError(f"need q >= 2, got {q}")
    idx = np.arange(1, n_max, dtype=np.float64)
    growth = 1.0 if math.isinf(r) else 1.0 + 2.0 * idx ** (-r)
    a = (1.0 - 1.0 / (idx + 1.0)) ** 2 * growth
    b = V / (idx + 1.0) ** 2 + cbar * idx ** (-q)
    a = np.ascontiguousarray(np.broadcast_to(a, idx.shape), dtype=np.float64)
    u = np.asarray(core.affine_recurrence(a, np.ascontiguousarray(b), V + cbar))
    n = np.arange(1, n_max + 1, dtype=np.float64)
    expo = min(r, q - 1.0)
    scaled = (u - V / n) * n ** expo
    k = int(np.argmax(scaled))
    return PowerRecursionResult(n, u, expo, float(scaled[k]), int(n[k]))
