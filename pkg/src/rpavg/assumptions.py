"""Numerical checks of the growth and noise conditions behind the Lyapunov analysis.

The Lyapunov function is ``V_p(x) = f(x)^p exp(phi(f(x)))`` with
``phi(t) = (1 + t^2)^((1 - 2r)/2)`` (or ``phi = 1`` in the strongly convex
case). Every checker returns a report object with ``passed`` and a JSON
serialisation; none of them proves anything, they evaluate the relevant
quantities on grids, rays or Monte Carlo samples and say what they saw.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .schedule import StepSchedule, _ols

SINGULAR_RADIUS = 1e-8


class RemovableSingularity(ValueError):
    """Closed-form Lyapunov derivatives are 0/0 this close to the minimiser."""


class PhiFunction:
    """``phi(t) = (1 + t^2)^((1 - 2r)/2)``; ``r=None`` (or 1/2) gives ``phi = 1``."""

    def __init__(self, r=None):
        if r is not None and not 0 <= r <= 0.5:
            raise ValueError("r must lie in [0, 1/2]")
        self.r = r
        self.k = 0.0 if r is None else 1.0 - 2.0 * r

    @property
    def constant(self):
        return self.k == 0.0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.constant:
            return np.ones_like(t)
        return (1.0 + t * t) ** (0.5 * self.k)

    def d1(self, t):
        t = np.asarray(t, dtype=float)
        if self.constant:
            return np.zeros_like(t)
        return self.k * t * (1.0 + t * t) ** (0.5 * self.k - 1.0)

    def d2(self, t):
        t = np.asarray(t, dtype=float)
        if self.constant:
            return np.zeros_like(t)
        u = 1.0 + t * t
        return self.k * u ** (0.5 * self.k - 2.0) * (u + (self.k - 2.0) * t * t)

    def subadditivity_constant(self, rng, pairs=10**4, hi=1e3, spacing="log"):
        """Empirical ``max(phi(x+y) - phi(x) - phi(y))`` over random pairs in ``[0, hi]^2``.

        The maximiser sits at ``x, y`` of order one, so by default the pairs are
        log-uniform on ``[hi * 1e-6, hi]``; ``spacing="uniform"`` samples the
        square uniformly.
        """
        if spacing == "log":
            x = hi * 10.0 ** (-6.0 * rng.random(pairs))
            y = hi * 10.0 ** (-6.0 * rng.random(pairs))
        elif spacing == "uniform":
            x = rng.random(pairs) * hi
            y = rng.random(pairs) * hi
        else:
            raise ValueError("spacing must be 'log' or 'uniform'")
        return float(np.max(self(x + y) - self(x) - self(y)))

    def concavity_onset(self, grid, slack=lambda t: 1e-6 / (1.0 + t)):
        """Smallest grid point past which ``phi'' <= slack`` holds on the rest of the grid.

        For ``r = 0`` the second derivative is positive everywhere and only
        decays like ``t^-3``; the slack makes the eventual-concavity
        condition testable. Returns ``inf`` if it never settles on the grid.
        """
        grid = np.sort(np.asarray(grid, dtype=float))
        ok = self.d2(grid) <= slack(grid)
        if not ok[-1]:
            return math.inf
        bad = np.nonzero(~ok)[0]
        return float(grid[0] if bad.size == 0 else grid[bad[-1] + 1])

    def describe(self):
        return {"r": self.r, "constant": self.constant}


# ---------------------------------------------------------------------------
# Lyapunov function


def lyapunov_value(problem, phi: PhiFunction, p, x):
    if p < 1:
        raise ValueError("p must be >= 1")
    f = problem.value(x)
    return f ** p * math.exp(float(phi(f)))


def _psi(phi, p, f):
    psi1 = p / f + float(phi.d1(f))
    psi2 = psi1 * psi1 - p / (f * f) + float(phi.d2(f))
    return psi1, psi2


def _check_singular(problem, x):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.linalg.norm(x - problem.theta_star) <= SINGULAR_RADIUS:
        raise RemovableSingularity(f"point within {SINGULAR_RADIUS} of the minimiser")
    return x


def lyapunov_gradient(problem, phi: PhiFunction, p, x):
    """``V_p (p / f + phi'(f)) grad f``."""
    x = _check_singular(problem, x)
    f = problem.value(x)
    V = f ** p * math.exp(float(phi(f)))
    psi1, _ = _psi(phi, p, f)
    return V * psi1 * problem.gradient(x)


def lyapunov_hessian(problem, phi: PhiFunction, p, x):
    """``V_p (psi2 grad f grad f^T + psi1 D^2 f)`` with
    ``psi1 = p/f + phi'(f)`` and ``psi2 = psi1^2 - p/f^2 + phi''(f)``."""
    x = _check_singular(problem, x)
    f = problem.value(x)
    V = f ** p * math.exp(float(phi(f)))
    psi1, psi2 = _psi(phi, p, f)
    g = problem.gradient(x)
    return V * (psi2 * np.outer(g, g) + psi1 * np.asarray(problem.hessian(x)))


def descent_ratio(problem, phi: PhiFunction, p, x):
    """``<grad V_p, grad f> / V_p = (p / f + phi'(f)) |grad f|^2``."""
    x = _check_singular(problem, x)
    f = problem.value(x)
    g = problem.gradient(x)
    psi1, _ = _psi(phi, p, f)
    return psi1 * float(g @ g)


# ---------------------------------------------------------------------------
# reports


class _Report:
    def to_dict(self):
        return _jsonable(asdict(self))

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def region_points(problem, half_width=10.0, grid=2001, exclude=1e-6, rng=None):
    """Evaluation points in the box ``theta* +- half_width``, minus a small ball.

    In one dimension a uniform grid; otherwise a tensor grid with about
    ``grid`` points.
    """
    d = problem.dim
    ts = problem.theta_star
    if d == 1:
        pts = ts[0] + np.linspace(-half_width, half_width, grid)[:, None]
    else:
        per = max(3, int(round(grid ** (1.0 / d))))
        axes = [np.linspace(-half_width, half_width, per)] * d
        pts = ts + np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    keep = np.linalg.norm(pts - ts, axis=1) > exclude
    return pts[keep]


@dataclass
class HphiReport(_Report):
    checker: str
    m_hat: float
    M_hat: float
    violations: list
    passed: bool
    grid: dict
    rel_floor: float


def check_h_phi(problem, phi: PhiFunction, points=None, half_width=10.0, grid=2001,
                exclude=1e-6, rel_floor=1e-2) -> HphiReport:
    """Evaluate ``phi'(f)|grad f|^2 + |grad f|^2 / f`` over a region.

    A point is a violation if the quantity is non-finite, non-positive, or
    below ``rel_floor`` times the region maximum: on a finite grid "bounded
    away from zero" can only be judged relative to the scale of the
    quantity itself.
    """
    if points is None:
        points = region_points(problem, half_width, grid, exclude)
        spec = {"half_width": half_width, "points": int(len(points)), "exclude": exclude}
    else:
        points = np.asarray(points, dtype=float).reshape(-1, problem.dim)
        spec = {"points": int(len(points)), "explicit": True}
    vals = np.empty(len(points))
    with np.errstate(all="ignore"):
        for k, x in enumerate(points):
            f = problem.value(x)
            g = problem.gradient(x)
            g2 = float(g @ g)
            vals[k] = float(phi.d1(f)) * g2 + g2 / f
    finite = np.isfinite(vals)
    M = float(np.max(vals[finite])) if finite.any() else math.inf
    bad = ~finite | (vals <= 0) | (vals < rel_floor * M)
    m = float(np.min(vals[finite])) if finite.any() else math.nan
    viol = [points[k].tolist() for k in np.nonzero(bad)[0]]
    passed = (not viol) and m > 0 and math.isfinite(M)
    return HphiReport("h_phi", m, M if finite.all() else math.inf, viol, bool(passed), spec,
                      rel_floor)


def _directions(d, rng, minimum=64):
    if d == 1:
        return np.array([[1.0], [-1.0]])
    eye = np.eye(d)
    axes = np.concatenate([eye, -eye])
    count = max(2 * d, minimum - 2 * d)
    g = rng.standard_normal((count, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return np.concatenate([axes, g])


@dataclass
class KLReport(_Report):
    checker: str
    r: float
    radii: list
    estimates: list
    liminf: float
    limsup: float
    slope: float
    directions: int
    passed: bool
    note: str = "minimum over sampled directions, not over all of R^d"


def check_h_kl(problem, r, ray_radii=(10.0, 20.0, 40.0, 80.0), rng=None, min_directions=64,
               slope_tol=-0.1) -> KLReport:
    """Ray surrogate for ``liminf_{|x|->inf} f^-r |grad f| > 0``.

    At each radius the minimum of ``f^-r |grad f|`` over directions is taken.
    The check passes when that minimum stays positive at the largest radii
    and its log-log trend over the last three radii is not decaying
    (slope >= ``slope_tol``).
    """
    radii = np.asarray(ray_radii, dtype=float)
    if radii.size < 3 or np.any(np.diff(radii) <= 0):
        raise ValueError("need at least three increasing radii")
    rng = np.random.default_rng(0) if rng is None else rng
    dirs = _directions(problem.dim, rng, min_directions)
    ts = problem.theta_star
    est, top = [], []
    for rad in radii:
        vals = []
        for u in dirs:
            x = ts + rad * u
            f = problem.value(x)
            g = np.linalg.norm(problem.gradient(x))
            vals.append(g * f ** (-r) if f > 0 else math.inf)
        est.append(min(vals))
        top.append(max(vals))
    est = np.array(est)
    tail = est[-3:]
    if np.all(tail > 0) and np.all(np.isfinite(tail)):
        slope = _ols(np.log(radii[-3:]), np.log(tail))[0]
    else:
        slope = -math.inf
    liminf = float(tail.min())
    passed = liminf > 0 and slope >= slope_tol
    return KLReport("h_kl", float(r), radii.tolist(), est.tolist(), liminf, float(top[-1]),
                    float(slope), len(dirs), bool(passed))


@dataclass
class MomentReport(_Report):
    checker: str
    p: float
    u_grid: list
    thetas: list
    table: list
    overflow: bool
    passed: bool
    draws: int


def check_noise_moments(problem, phi: PhiFunction, p, u_grid=(0.1, 0.5, 1.0), draws=10**5,
                        thetas=None, rng=None) -> MomentReport:
    """Monte Carlo ``E[|dM|^(2p+2) exp(phi(u |dM|^2))]`` at a few points and scales."""
    if draws < 10**4:
        raise ValueError("need at least 10^4 draws per point")
    rng = np.random.default_rng(0) if rng is None else rng
    ts = problem.theta_star
    if thetas is None:
        thetas = [ts] + [ts + s * e for e in np.eye(problem.dim) for s in (-1.0, 1.0)]
    thetas = [np.asarray(t, dtype=float) for t in thetas]
    table, overflow = [], False
    for th in thetas:
        noise = problem.draw_noise(rng, draws)
        dM = problem.gradient(th) - problem.stochastic_gradient_batch(th, *noise)
        a2 = np.sum(dM * dM, axis=1)
        row = []
        for u in u_grid:
            logs = (p + 1.0) * np.log(np.where(a2 > 0, a2, 1.0)) + phi(u * a2)
            logs = np.where(a2 > 0, logs, -np.inf)
            if np.max(logs) > 700:
                overflow = True
                row.append(math.inf)
            else:
                row.append(float(np.mean(np.exp(logs))))
        table.append(row)
    passed = (not overflow) and bool(np.all(np.isfinite(table)))
    return MomentReport("noise_moments", float(p), list(u_grid), [t.tolist() for t in thetas],
                        table, overflow, passed, int(draws))


@dataclass
class DescentReport(_Report):
    checker: str
    n: list
    ev: list
    ratio: list
    slope: float
    c1_hat: float
    c2_hat: float
    monotone_after_n0: bool
    offending: int | None
    passed: bool
    replications: int


def descent_diagnostic(result, problem, phi: PhiFunction, p, schedule: StepSchedule, n0=100,
                       slope_tol=0.1, min_replications=500) -> DescentReport:
    """Boundedness of ``E[V_p(theta_n)] / gamma_n^p`` over checkpoints past ``n0``.

    ``result`` is a :class:`rpavg.sgd.SimulationResult`. The ratio passes
    when its log-log trend past ``n0`` is at most ``slope_tol``. The
    constants of the one-step descent inequality are fitted by least
    squares on the increments between checkpoints
    ``EV_{n'} - EV_n ~ -c1 (Gamma_{n'} - Gamma_n) EV_n + c2 sum gamma_k^(p+1)``.
    """
    keep = ~result.diverged
    raw = result.raw[keep]
    R = raw.shape[0]
    if R < min_replications:
        warnings.warn(f"descent diagnostic with {R} < {min_replications} replications",
                      RuntimeWarning, stacklevel=2)
    cps = result.checkpoints
    ts = problem.theta_star
    ev = np.empty(cps.size)
    for j in range(cps.size):
        f = np.clip(problem.value_batch(ts + raw[:, j]), 0.0, None)
        ev[j] = float(np.mean(f ** p * np.exp(phi(f))))
    gam = schedule.gamma * cps.astype(float) ** (-schedule.beta)
    ratio = ev / gam ** p
    sel = cps >= n0
    if sel.sum() < 3:
        raise ValueError("need at least three checkpoints past n0")
    with np.errstate(divide="ignore"):
        lr = np.log(ratio[sel])
    if np.all(np.isfinite(lr)):
        slope = _ols(np.log(cps[sel].astype(float)), lr)[0]
    else:
        slope = math.nan if np.all(ev[sel] == 0) else math.inf
    # increments between consecutive checkpoints
    A, b = [], []
    idx = np.nonzero(sel)[0]
    for j0, j1 in zip(idx[:-1], idx[1:]):
        k = np.arange(cps[j0] + 1, cps[j1] + 1, dtype=float)
        gk = schedule.gamma * k ** (-schedule.beta)
        A.append([-gk.sum() * ev[j0], float(np.sum(gk ** (p + 1)))])
        b.append(ev[j1] - ev[j0])
    coef = np.linalg.lstsq(np.array(A), np.array(b), rcond=None)[0]
    monotone = bool(np.all(np.diff(ev[sel]) <= 0))
    bounded = np.all(np.isfinite(ratio[sel])) and (math.isnan(slope) or slope <= slope_tol)
    offending = None if bounded else int(cps[sel][int(np.nanargmax(ratio[sel]))])
    return DescentReport("descent", cps.tolist(), ev.tolist(), ratio.tolist(),
                         float(slope) if np.isfinite(slope) else slope, float(coef[0]),
                         float(coef[1]), monotone, offending, bool(bounded), int(R))


# ---------------------------------------------------------------------------
# growth through the gradient flow


def desingularize(a, r):
    """``a^(1-r) / (1-r)``."""
    return a ** (1.0 - r) / (1.0 - r)


@dataclass
class FlowPath:
    start: list
    length: float
    margin: float
    chain_min: float
    chord_gap: float
    steps: int
    converged: bool
    arc_monotone: bool


@dataclass
class GrowthCertificate(_Report):
    checker: str
    r: float
    m: float
    paths: list = field(default_factory=list)
    status: str = "inconclusive"

    @property
    def passed(self):
        return self.status == "certified"

    @property
    def margins(self):
        return [p.margin for p in self.paths]

    @property
    def lengths(self):
        return [p.length for p in self.paths]

    def to_dict(self):
        out = super().to_dict()
        out["passed"] = self.passed
        return out


def _rk4_flow(grad, x, h, stop_radius, ts, max_steps):
    """Integrate ``x' = -grad(x)`` with arc length; returns the path samples."""
    xs = [x.copy()]
    Ls = [0.0]
    L = 0.0
    steps = 0

    def rhs(y):
        g = grad(y)
        return -g, float(np.linalg.norm(g))

    while np.linalg.norm(x - ts) > stop_radius:
        if steps >= max_steps:
            return np.array(xs), np.array(Ls), steps, False
        k1, l1 = rhs(x)
        k2, l2 = rhs(x + 0.5 * h * k1)
        k3, l3 = rhs(x + 0.5 * h * k2)
        k4, l4 = rhs(x + h * k3)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        L = L + h / 6.0 * (l1 + 2 * l2 + 2 * l3 + l4)
        steps += 1
        xs.append(x.copy())
        Ls.append(L)
    return np.array(xs), np.array(Ls), steps, True


def verify_growth_by_flow(problem, r, start_points, m, ode_tolerance=1e-6, stop_radius=1e-6,
                          max_steps=10**7, h0=None) -> GrowthCertificate:
    """Follow the gradient flow from each start and test the growth chain.

    Along the flow ``chi`` from ``x`` the verifier records arc length
    ``L(0, t)`` and checks pointwise
    ``phibar(f(x)) - phibar(f(chi_t)) >= m L(0, t)`` with
    ``phibar(a) = a^(1-r) / (1-r)``, then the consequence
    ``f(x) >= (m (1-r))^(1/(1-r)) |x - theta*|^(1/(1-r))``.
    The time step is halved until the total arc length changes by less
    than ``ode_tolerance`` (relative). A start whose flow does not reach
    the stopping ball within the step budget makes the result
    inconclusive rather than failed.
    """
    if not 0 <= r <= 0.5:
        raise ValueError("r must lie in [0, 1/2]")
    ts = problem.theta_star
    cert = GrowthCertificate("growth_flow", float(r), float(m))
    expo = 1.0 / (1.0 - r)
    coef = (m * (1.0 - r)) ** expo
    tol = ode_tolerance
    inconclusive = False
    failed = False
    for x0 in start_points:
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        dist = float(np.linalg.norm(x0 - ts))
        f0 = problem.value(x0)
        if dist <= stop_radius:
            cert.paths.append(FlowPath(x0.tolist(), 0.0, f0 - coef * dist ** expo, 0.0, 0.0, 0,
                                       True, True))
            continue
        if h0 is None:
            curv = max(np.linalg.norm(problem.hessian(x0), 2),
                       np.linalg.norm(problem.hessian(ts), 2), 1e-12)
            h = 0.25 / curv
        else:
            h = h0
        prev = None
        while True:
            xs, Ls, steps, ok = _rk4_flow(problem.gradient, x0, h, stop_radius, ts, max_steps)
            if not ok:
                break
            if prev is not None and abs(Ls[-1] - prev) <= tol * max(Ls[-1], 1e-300):
                break
            prev = Ls[-1]
            h *= 0.5
        if not ok:
            inconclusive = True
            cert.paths.append(FlowPath(x0.tolist(), float(Ls[-1]), math.nan, math.nan, math.nan,
                                       steps, False, bool(np.all(np.diff(Ls) >= 0))))
            continue
        fs = np.clip(problem.value_batch(xs), 0.0, None)
        chain = desingularize(f0, r) - desingularize(fs, r) - m * Ls
        chord = Ls - np.linalg.norm(xs - x0, axis=1)
        margin = f0 - coef * dist ** expo
        scale = max(1.0, f0)
        cert.paths.append(FlowPath(x0.tolist(), float(Ls[-1]), float(margin),
                                   float(chain.min()), float(chord.min()), steps, True,
                                   bool(np.all(np.diff(Ls) >= 0))))
        slack = 1e-4 * scale + m * stop_radius
        if margin < -slack or chain.min() < -slack or chord.min() < -slack:
            failed = True
    cert.status = "failed" if failed else ("inconclusive" if inconclusive else "certified")
    return cert
