"""Stochastic minimisation problems: exact oracles plus unbiased gradient draws.

A problem exposes the deterministic objective (``value``, ``gradient``,
``hessian``), its minimiser ``theta_star``, one-draw stochastic gradients and
the conditional covariance of the gradient noise. Noise draws are generated
in blocks by ``draw_noise`` so that the compiled kernels can consume them.

The martingale increment follows the sign used in the averaged recursion,
``dM = gradient(theta) - stochastic_gradient(theta, z)``, so that an SGD step
reads ``theta - step * gradient(theta) + step * dM``.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import ndtr, ndtri

_GL_T, _GL_W = leggauss(32)
_GL_T = 0.5 * (_GL_T + 1.0)
_GL_W = 0.5 * _GL_W

_SQRT2PI = math.sqrt(2.0 * math.pi)


def _as_vec(theta, dim):
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    if theta.shape != (dim,):
        raise ValueError(f"expected a vector of length {dim}, got shape {theta.shape}")
    return theta


def _sigmoid(s):
    z = np.exp(-np.abs(s))
    return np.where(s >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _softplus(s):
    # log(1 + e^s)
    return np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s)))


class ProblemSpec:
    """Base class; subclasses fill in the oracles.

    ``noise_kind`` is ``"analytic"`` when ``noise_covariance`` is exact and
    ``"monte-carlo"`` when it is estimated from draws. ``kernel`` names the
    compiled loop able to run this problem (None means the generic per-step
    Python path).
    """

    key = "abstract"
    kernel = None
    noise_kind = "analytic"
    kl_exponent = None

    def __init__(self, dim, theta_star):
        self.dim = int(dim)
        self.theta_star = _as_vec(theta_star, self.dim)
        self.theta_star.setflags(write=False)

    # deterministic oracles
    def value(self, theta):
        raise NotImplementedError

    def gradient(self, theta):
        raise NotImplementedError

    def hessian(self, theta):
        raise NotImplementedError

    def value_batch(self, thetas):
        return np.array([self.value(t) for t in np.asarray(thetas)])

    # stochastic oracles
    def draw_noise(self, rng, size):
        """Tuple of arrays with leading axis ``size``."""
        raise NotImplementedError

    def stochastic_gradient(self, theta, *z):
        raise NotImplementedError

    def stochastic_gradient_batch(self, thetas, *z):
        """Row-wise stochastic gradients for ``thetas`` of shape (N, d) and N draws."""
        thetas = np.broadcast_to(np.asarray(thetas, dtype=float), (z[0].shape[0], self.dim))
        return np.array([self.stochastic_gradient(t, *(a[i] for a in z))
                         for i, t in enumerate(thetas)])

    def sample_gradient(self, theta, rng):
        draw = self.draw_noise(rng, 1)
        return self.stochastic_gradient(theta, *(a[0] for a in draw))

    def increment(self, theta, *z):
        """Martingale increment ``gradient - stochastic_gradient``."""
        return self.gradient(theta) - self.stochastic_gradient(theta, *z)

    def noise_covariance(self, theta, rng=None, draws=10**6):
        raise NotImplementedError

    def kernel_args(self):
        """Extra arguments for the compiled kernel (after the noise arrays)."""
        return ()

    def describe(self):
        return {"key": self.key, "dim": self.dim, "theta_star": self.theta_star.tolist()}


# ---------------------------------------------------------------------------
# quantile


class NormalLaw:
    name = "normal"

    def __init__(self, loc=0.0, scale=1.0):
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.loc = float(loc)
        self.scale = float(scale)

    def cdf(self, x):
        return ndtr((np.asarray(x, dtype=float) - self.loc) / self.scale)

    def pdf(self, x):
        z = (np.asarray(x, dtype=float) - self.loc) / self.scale
        return np.exp(-0.5 * z * z) / (_SQRT2PI * self.scale)

    def ppf(self, u):
        return self.loc + self.scale * ndtri(u)

    def cdf_integral(self, x):
        """An antiderivative of the cdf."""
        z = (np.asarray(x, dtype=float) - self.loc) / self.scale
        return self.scale * (z * ndtr(z) + np.exp(-0.5 * z * z) / _SQRT2PI)

    def sample_deviation(self, rng, size, level):
        # scale * (z - z_level) stays exact under shifts of loc
        return self.scale * (rng.standard_normal(size) - ndtri(level))

    def describe(self):
        return {"law": "normal", "loc": self.loc, "scale": self.scale}


class PiecewiseLinearLaw:
    """Law with a piecewise-linear cdf through the knots ``(x_i, G_i)``.

    The first knot must carry ``G = 0`` and the last ``G = 1``; ``G`` must be
    strictly increasing, which makes the density positive on the support.
    """

    name = "piecewise-linear"

    def __init__(self, x, G, source=None):
        x = np.asarray(x, dtype=float)
        G = np.asarray(G, dtype=float)
        if x.ndim != 1 or x.shape != G.shape or x.size < 2:
            raise ValueError("need matching 1-D knot arrays with at least two knots")
        if np.any(np.diff(x) <= 0):
            raise ValueError("knot abscissae must be strictly increasing")
        if np.any(np.diff(G) <= 0):
            raise ValueError("cdf values must be strictly increasing")
        if abs(G[0]) > 1e-12 or abs(G[-1] - 1.0) > 1e-12:
            raise ValueError("cdf must start at 0 and end at 1")
        self.x, self.G = x, G
        self.slopes = np.diff(G) / np.diff(x)
        seg = 0.5 * (G[1:] + G[:-1]) * np.diff(x)
        self._cum = np.concatenate([[0.0], np.cumsum(seg)])
        self.source = source

    @classmethod
    def from_csv(cls, path):
        rows = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                try:
                    rows.append((float(row[0]), float(row[1])))
                except ValueError:
                    if rows:
                        raise
                    continue  # header line
        if not rows:
            raise ValueError(f"{path}: no knots found")
        arr = np.array(rows)
        return cls(arr[:, 0], arr[:, 1], source=str(path))

    def cdf(self, x):
        return np.interp(x, self.x, self.G, left=0.0, right=1.0)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        i = np.clip(np.searchsorted(self.x, x, side="right") - 1, 0, self.slopes.size - 1)
        inside = (x >= self.x[0]) & (x < self.x[-1])
        return np.where(inside, self.slopes[i], 0.0)

    def ppf(self, u):
        return np.interp(u, self.G, self.x)

    def cdf_integral(self, x):
        x = np.asarray(x, dtype=float)
        xc = np.clip(x, self.x[0], self.x[-1])
        i = np.clip(np.searchsorted(self.x, xc, side="right") - 1, 0, self.slopes.size - 1)
        dx = xc - self.x[i]
        part = self._cum[i] + self.G[i] * dx + 0.5 * self.slopes[i] * dx * dx
        return part + np.maximum(x - self.x[-1], 0.0)

    def sample_deviation(self, rng, size, level):
        return self.ppf(rng.random(size)) - self.ppf(level)

    def describe(self):
        return {"law": "piecewise-linear", "source": self.source, "knots": int(self.x.size)}


def quantile_sample_gradient(theta, x, alpha):
    """One stochastic gradient of the quantile objective: ``1{x <= theta} - (1 - alpha)``."""
    return (1.0 if x <= theta else 0.0) - (1.0 - alpha)


class QuantileProblem(ProblemSpec):
    """Recursive estimation of the point ``q`` with ``G(q) = 1 - alpha``.

    The objective is ``f(theta) = int_q^theta (G(u) - G(q)) du`` (zero at ``q``),
    written in the original coordinates. The kernel consumes centred draws
    ``x - q``.
    """

    kernel = "quantile"
    kl_exponent = 0.0

    def __init__(self, law=None, alpha=0.5):
        if not 0 < alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        self.law = NormalLaw() if law is None else law
        self.alpha = float(alpha)
        self.level = 1.0 - self.alpha
        self.key = "quantile-normal" if isinstance(self.law, NormalLaw) else "quantile-custom"
        super().__init__(1, [float(self.law.ppf(self.level))])
        self.q = float(self.theta_star[0])
        if float(self.law.pdf(self.q)) <= 0:
            raise ValueError("density vanishes at the target quantile")

    def _smooth(self):
        return isinstance(self.law, NormalLaw)

    def value(self, theta):
        t = float(_as_vec(theta, 1)[0])
        h = t - self.q
        if self._smooth() and abs(h) <= 1.0:
            # int_q^t (t - u) p(u) du has a positive integrand
            u = self.q + _GL_T * h
            return float(h * h * np.sum(_GL_W * (1.0 - _GL_T) * self.law.pdf(u)))
        law = self.law
        return float(law.cdf_integral(t) - law.cdf_integral(self.q) - self.level * h)

    def value_batch(self, thetas):
        t = np.asarray(thetas, dtype=float).reshape(-1)
        h = t - self.q
        law = self.law
        out = law.cdf_integral(t) - law.cdf_integral(self.q) - self.level * h
        if self._smooth():
            small = np.abs(h) <= 1.0
            if np.any(small):
                hs = h[small]
                u = self.q + np.outer(hs, _GL_T)
                out[small] = hs * hs * ((_GL_W * (1.0 - _GL_T)) * law.pdf(u)).sum(axis=1)
        return out

    def gradient(self, theta):
        t = float(_as_vec(theta, 1)[0])
        h = t - self.q
        if self._smooth() and abs(h) <= 1.0:
            u = self.q + _GL_T * h
            return np.array([h * float(np.sum(_GL_W * self.law.pdf(u)))])
        return np.array([float(self.law.cdf(t)) - self.level])

    def hessian(self, theta):
        t = float(_as_vec(theta, 1)[0])
        return np.array([[float(self.law.pdf(t))]])

    def draw_noise(self, rng, size):
        return (self.law.sample_deviation(rng, size, self.level),)

    def stochastic_gradient(self, theta, dev):
        t = float(_as_vec(theta, 1)[0])
        return np.array([quantile_sample_gradient(t - self.q, float(dev), self.alpha)])

    def stochastic_gradient_batch(self, thetas, dev):
        thetas = np.broadcast_to(np.asarray(thetas, dtype=float), (dev.shape[0], 1))
        return ((dev <= thetas[:, 0] - self.q).astype(float) - self.level)[:, None]

    def noise_covariance(self, theta, rng=None, draws=None):
        G = float(self.law.cdf(float(_as_vec(theta, 1)[0])))
        return np.array([[G * (1.0 - G)]])

    def kernel_args(self):
        return (self.level,)

    def describe(self):
        out = super().describe()
        out.update(alpha=self.alpha, **self.law.describe())
        return out


# ---------------------------------------------------------------------------
# least squares


def _psd_sqrt_factor(S):
    w, V = np.linalg.eigh(S)
    if w.min() < -1e-12 * max(1.0, abs(w).max()):
        raise ValueError("noise covariance must be positive semi-definite")
    return V * np.sqrt(np.clip(w, 0.0, None))


class LeastSquaresProblem(ProblemSpec):
    """``f(theta) = (theta - theta*)^T H (theta - theta*) / 2`` with additive Gaussian gradient noise."""

    key = "least-squares"
    kernel = "linear"
    kl_exponent = 0.5
    constant_hessian = True

    def __init__(self, H, theta_star=None, S0=None):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        if H.shape[0] != H.shape[1] or not np.allclose(H, H.T, rtol=0, atol=1e-14):
            raise ValueError("H must be a symmetric square matrix")
        if np.linalg.eigvalsh(H).min() <= 0:
            raise ValueError("H must be positive definite")
        d = H.shape[0]
        super().__init__(d, np.zeros(d) if theta_star is None else theta_star)
        self.H = np.ascontiguousarray(H)
        self.S0 = np.eye(d) if S0 is None else np.atleast_2d(np.asarray(S0, dtype=float))
        if self.S0.shape != (d, d):
            raise ValueError("S0 must be d x d")
        self.L = _psd_sqrt_factor(self.S0)
        self.strong_convexity = float(np.linalg.eigvalsh(H).min())

    def value(self, theta):
        e = _as_vec(theta, self.dim) - self.theta_star
        return 0.5 * float(e @ self.H @ e)

    def value_batch(self, thetas):
        e = np.asarray(thetas, dtype=float).reshape(-1, self.dim) - self.theta_star
        return 0.5 * np.einsum("ni,ij,nj->n", e, self.H, e)

    def gradient(self, theta):
        return self.H @ (_as_vec(theta, self.dim) - self.theta_star)

    def hessian(self, theta):
        return self.H.copy()

    def draw_noise(self, rng, size):
        z = rng.standard_normal((size, self.dim))
        return (z @ self.L.T,)

    def stochastic_gradient(self, theta, w):
        return self.gradient(theta) - np.asarray(w, dtype=float)

    def stochastic_gradient_batch(self, thetas, w):
        e = np.asarray(thetas, dtype=float) - self.theta_star
        return e @ self.H.T - w

    def noise_covariance(self, theta, rng=None, draws=None):
        return self.S0.copy()

    def kernel_args(self):
        return (self.H,)

    def describe(self):
        out = super().describe()
        out.update(H=self.H.tolist(), S0=self.S0.tolist())
        return out


# ---------------------------------------------------------------------------
# logistic regression


def logistic_sample_gradient(theta, x, y):
    """Stochastic gradient ``-y x / (1 + exp(y <theta, x>))`` of the logistic loss."""
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    s = y * float(theta @ x)
    return -y * x * float(_sigmoid(-s))


class LogisticProblem(ProblemSpec):
    """Well-specified logistic regression with a design uniform in a ball.

    ``f``, its gradient and Hessian have no closed form; they are evaluated by
    averaging over a fixed-seed sample of ``quadrature_draws`` designs with
    the label marginalised exactly. The minimiser of this cached average is
    exactly ``theta_star``.
    """

    key = "logistic-synthetic"
    kernel = "logistic"
    noise_kind = "monte-carlo"
    kl_exponent = 0.0

    def __init__(self, theta_star=(1.0, -1.0), radius=2.0, quadrature_draws=10**6,
                 quadrature_seed=20240611):
        theta_star = np.atleast_1d(np.asarray(theta_star, dtype=float))
        super().__init__(theta_star.size, theta_star)
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.radius = float(radius)
        self.quadrature_draws = int(quadrature_draws)
        self.quadrature_seed = int(quadrature_seed)
        rng = np.random.default_rng(self.quadrature_seed)
        self._X = self._design(rng, self.quadrature_draws)
        self._p_star = _sigmoid(self._X @ self.theta_star)
        self._f_star = 0.0
        self._f_star = self.value(self.theta_star)

    def _design(self, rng, size):
        g = rng.standard_normal((size, self.dim))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        rad = self.radius * rng.random(size) ** (1.0 / self.dim)
        return g * rad[:, None]

    def value(self, theta):
        s = self._X @ _as_vec(theta, self.dim)
        loss = self._p_star * _softplus(-s) + (1.0 - self._p_star) * _softplus(s)
        return float(loss.mean()) - self._f_star

    def gradient(self, theta):
        s = self._X @ _as_vec(theta, self.dim)
        return self._X.T @ (_sigmoid(s) - self._p_star) / self._X.shape[0]

    def hessian(self, theta):
        return self.hessian_weighted(_as_vec(theta, self.dim)[None, :], np.ones(1))

    def hessian_weighted(self, thetas, weights):
        """``sum_k w_k D^2 f(theta_k)`` in one pass over the cached design."""
        s = self._X @ np.asarray(thetas, dtype=float).T
        sg = _sigmoid(s)
        w = (sg * (1.0 - sg)) @ np.asarray(weights, dtype=float)
        return (self._X * w[:, None]).T @ self._X / self._X.shape[0]

    def draw_noise(self, rng, size):
        x = self._design(rng, size)
        p = _sigmoid(x @ self.theta_star)
        y = np.where(rng.random(size) < p, 1.0, -1.0)
        return (x, y)

    def stochastic_gradient(self, theta, x, y):
        return logistic_sample_gradient(_as_vec(theta, self.dim), x, float(y))

    def stochastic_gradient_batch(self, thetas, x, y):
        thetas = np.broadcast_to(np.asarray(thetas, dtype=float), x.shape)
        s = y * np.einsum("ij,ij->i", thetas, x)
        return -(y * _sigmoid(-s))[:, None] * x

    def noise_covariance(self, theta, rng=None, draws=10**6):
        """Monte Carlo estimate of ``Cov(stochastic_gradient(theta, Z))``."""
        rng = np.random.default_rng(0) if rng is None else rng
        theta = _as_vec(theta, self.dim)
        x, y = self.draw_noise(rng, draws)
        s = y * (x @ theta)
        g = -(y * _sigmoid(-s))[:, None] * x
        return np.cov(g, rowvar=False, bias=False).reshape(self.dim, self.dim)

    def noise_covariance_semianalytic(self, theta):
        """Label-marginalised second moment over the cached design, minus the squared mean."""
        theta = _as_vec(theta, self.dim)
        sg = _sigmoid(self._X @ theta)
        w = self._p_star * (1.0 - sg) ** 2 + (1.0 - self._p_star) * sg ** 2
        second = (self._X * w[:, None]).T @ self._X / self._X.shape[0]
        g = self.gradient(theta)
        return second - np.outer(g, g)

    def kernel_args(self):
        return (np.ascontiguousarray(self.theta_star),)

    def describe(self):
        out = super().describe()
        out.update(radius=self.radius, quadrature_draws=self.quadrature_draws,
                   quadrature_seed=self.quadrature_seed)
        return out


# ---------------------------------------------------------------------------
# counter-example with logarithmic growth


class LogGrowthProblem(ProblemSpec):
    """``f(x) = scale * log(1 + |x - theta*|^2)``: gradient vanishes at infinity.

    Smooth, unique minimiser, positive-definite Hessian there, but no
    asymptotic lower bound on ``|grad f|``; used to check that the assumption
    checkers reject it.
    """

    key = "log-growth"
    kernel = None

    def __init__(self, dim=1, scale=1.0, theta_star=None, noise_sd=1.0):
        super().__init__(dim, np.zeros(dim) if theta_star is None else theta_star)
        self.scale = float(scale)
        self.noise_sd = float(noise_sd)

    def value(self, theta):
        e = _as_vec(theta, self.dim) - self.theta_star
        return self.scale * math.log1p(float(e @ e))

    def gradient(self, theta):
        e = _as_vec(theta, self.dim) - self.theta_star
        return 2.0 * self.scale * e / (1.0 + float(e @ e))

    def hessian(self, theta):
        e = _as_vec(theta, self.dim) - self.theta_star
        r2 = float(e @ e)
        return 2.0 * self.scale * (np.eye(self.dim) / (1.0 + r2)
                                   - 2.0 * np.outer(e, e) / (1.0 + r2) ** 2)

    def draw_noise(self, rng, size):
        return (self.noise_sd * rng.standard_normal((size, self.dim)),)

    def stochastic_gradient(self, theta, w):
        return self.gradient(theta) - np.asarray(w, dtype=float)

    def stochastic_gradient_batch(self, thetas, w):
        e = np.asarray(thetas, dtype=float) - self.theta_star
        r2 = np.einsum("ij,ij->i", e, e)
        return 2.0 * self.scale * e / (1.0 + r2)[:, None] - w

    def noise_covariance(self, theta, rng=None, draws=None):
        return self.noise_sd ** 2 * np.eye(self.dim)


# ---------------------------------------------------------------------------
# registry


def _floats(value):
    if isinstance(value, str):
        return [float(v) for v in value.split(",") if v.strip()]
    return [float(v) for v in np.atleast_1d(value)]


def _matrix(value, dim):
    vals = _floats(value)
    if len(vals) == 1:
        return vals[0] * np.eye(dim)
    if len(vals) == dim:
        return np.diag(vals)
    if len(vals) == dim * dim:
        return np.array(vals).reshape(dim, dim)
    raise ValueError(f"cannot build a {dim}x{dim} matrix from {len(vals)} values")


def make_problem(key, **params):
    """Build a registered problem from flat parameters (strings accepted)."""
    if key == "quantile-normal":
        law = NormalLaw(float(params.pop("loc", 0.0)), float(params.pop("scale", 1.0)))
        prob = QuantileProblem(law, float(params.pop("alpha", 0.5)))
    elif key == "quantile-custom":
        if "csv" not in params:
            raise ValueError("quantile-custom needs problem.csv")
        law = PiecewiseLinearLaw.from_csv(Path(params.pop("csv")))
        prob = QuantileProblem(law, float(params.pop("alpha", 0.5)))
    elif key == "least-squares":
        dim = int(params.pop("dim", 1))
        H = _matrix(params.pop("h", 1.0), dim)
        S0 = _matrix(params.pop("s0", 1.0), dim)
        ts = params.pop("theta_star", None)
        ts = np.zeros(dim) if ts is None else np.array(_floats(ts))
        prob = LeastSquaresProblem(H, ts, S0)
    elif key == "logistic-synthetic":
        ts = np.array(_floats(params.pop("theta_star", "1,-1")))
        prob = LogisticProblem(ts, float(params.pop("radius", 2.0)),
                               int(float(params.pop("quadrature_draws", 10**6))),
                               int(params.pop("quadrature_seed", 20240611)))
    elif key == "log-growth":
        dim = int(params.pop("dim", 1))
        prob = LogGrowthProblem(dim, float(params.pop("scale", 1.0)),
                                noise_sd=float(params.pop("noise_sd", 1.0)))
    else:
        raise ValueError(f"unknown problem key {key!r}; known: {', '.join(PROBLEM_KEYS)}")
    if params:
        raise ValueError(f"unknown parameter(s) for {key}: {', '.join(sorted(params))}")
    return prob


PROBLEM_KEYS = ("quantile-normal", "quantile-custom", "least-squares", "logistic-synthetic",
                "log-growth")
