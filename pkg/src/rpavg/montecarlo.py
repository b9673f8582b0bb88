"""Replicated experiments: MSE curves, first-order checks and rate fits.

Replication ``i`` of an experiment with master seed ``s`` draws its noise
from ``numpy.random.default_rng(mix64(s, i))`` where ``mix64`` is the
splitmix64 finaliser applied to ``s + (i + 1) * 0x9E3779B97F4A7C15``
(all arithmetic mod 2^64):

    z = s + (i + 1) * 0x9E3779B97F4A7C15
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z = z ^ (z >> 31)
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .problems import make_problem
from .schedule import StepSchedule
from .sgd import SimulationResult, checkpoint_grid, simulate

log = logging.getLogger(__name__)

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(master_seed: int, index: int) -> int:
    z = (int(master_seed) + (int(index) + 1) * _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def replication_seeds(master_seed, replications):
    return [mix64(master_seed, i) for i in range(replications)]


class ExperimentFailed(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    problem: str
    gamma: float
    beta: float
    n_max: int
    replications: int
    master_seed: int = 0
    problem_params: dict = field(default_factory=dict)
    theta0: list | None = None
    per_decade: int = 10
    estimators: str = "both"
    burn_in: int = 0
    batch_size: int = 128
    workers: int = 1
    max_divergence: float = 0.01

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.estimators not in ("raw", "avg", "both"):
            raise ValueError("estimators must be raw, avg or both")
        if not 0 <= self.master_seed <= _MASK:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        StepSchedule(self.gamma, self.beta)

    @property
    def schedule(self):
        return StepSchedule(self.gamma, self.beta)

    def checkpoints(self):
        return checkpoint_grid(self.n_max, self.per_decade)


@dataclass
class MseCurve:
    n: np.ndarray
    mse: np.ndarray
    se: np.ndarray
    estimator: str
    replications: int

    @property
    def n_times_mse(self):
        return self.n * self.mse

    def to_csv(self, path=None, header=None):
        buf = io.StringIO()
        for line in header or []:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "mse", "se", "n_times_mse", "estimator"])
        for n, m, s, nm in zip(self.n, self.mse, self.se, self.n_times_mse):
            w.writerow([int(n), repr(float(m)), repr(float(s)), repr(float(nm)), self.estimator])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    curves: dict
    seeds: list
    diverged: int
    simulation: SimulationResult


def mse_curve(dev, checkpoints, estimator):
    """Aggregate per-replication deviations (R, J, d) in index order with ``fsum``."""
    sq = np.sum(dev * dev, axis=2)
    R = sq.shape[0]
    mse = np.array([math.fsum(sq[:, j]) / R for j in range(sq.shape[1])])
    if R > 1:
        var = np.array([math.fsum((sq[:, j] - mse[j]) ** 2) / (R - 1) for j in range(sq.shape[1])])
        se = np.sqrt(var / R)
    else:
        se = np.zeros_like(mse)
    return MseCurve(np.asarray(checkpoints), mse, se, estimator, R)


def run_experiment(config: ExperimentConfig, problem=None) -> ExperimentResult:
    """Run ``config.replications`` seeded replications and build the MSE curves.

    Diverged replications are dropped and counted; more than
    ``max_divergence`` of them raises :class:`ExperimentFailed`.
    """
    if problem is None:
        problem = make_problem(config.problem, **dict(config.problem_params))
    theta0 = np.zeros(problem.dim) if config.theta0 is None else np.asarray(config.theta0, float)
    seeds = replication_seeds(config.master_seed, config.replications)
    res = simulate(problem, config.schedule, theta0, config.n_max, seeds, config.checkpoints(),
                   burn_in=config.burn_in, batch_size=config.batch_size, workers=config.workers)
    ndiv = int(res.diverged.sum())
    if ndiv > config.max_divergence * config.replications:
        raise ExperimentFailed(f"{ndiv} of {config.replications} replications diverged")
    if ndiv:
        log.warning("%d replications diverged and were excluded", ndiv)
    keep = ~res.diverged
    curves = {}
    if config.estimators in ("avg", "both"):
        curves["avg"] = mse_curve(res.avg[keep], res.checkpoints, "avg")
    if config.estimators in ("raw", "both"):
        curves["raw"] = mse_curve(res.raw[keep], res.checkpoints, "raw")
    return ExperimentResult(config, curves, seeds, ndiv, res)


# ---------------------------------------------------------------------------
# rate fitting


@dataclass
class RateFit:
    slope: float
    intercept: float
    residual: float
    window: tuple
    points: int

    def to_dict(self):
        out = asdict(self)
        out["window"] = [int(w) if float(w).is_integer() else float(w) for w in self.window]
        return out

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def fit_rate(n, y) -> RateFit:
    """Ordinary least squares of ``log y`` on ``log n``."""
    n = np.asarray(n, dtype=float)
    y = np.asarray(y, dtype=float)
    if n.size < 3:
        raise ValueError("need at least three points")
    if np.any(y <= 0) or np.any(n <= 0):
        raise ValueError("rate fit needs positive values")
    A = np.vstack([np.log(n), np.ones_like(n)]).T
    coef, *_ = np.linalg.lstsq(A, np.log(y), rcond=None)
    res = float(np.linalg.norm(A @ coef - np.log(y)))
    return RateFit(float(coef[0]), float(coef[1]), res, (float(n.min()), float(n.max())), int(n.size))


@dataclass
class FirstOrderCheck:
    n: np.ndarray
    ratio: np.ndarray
    terminal: float
    band: tuple
    variation: float

    def within(self, tol):
        return abs(self.terminal - 1.0) <= tol


def first_order_check(curve: MseCurve, spectral, window=None) -> FirstOrderCheck:
    """``n mse(n) / Tr(Sigma*)`` over ``window`` (default: the last decade).

    ``band`` is the terminal ratio +- 1.96 Monte Carlo standard errors;
    ``variation`` is max/min - 1 of the ratio over the window.
    """
    tr = spectral.trace_sigma if hasattr(spectral, "trace_sigma") else float(spectral)
    n = curve.n
    if window is None:
        window = (n[-1] / 10.0, n[-1])
    lo, hi = window
    if lo < n[0] or hi > n[-1]:
        raise ValueError("window outside the checkpoint range")
    sel = (n >= lo) & (n <= hi)
    if not sel.any():
        raise ValueError("no checkpoints in the window")
    ratio = n[sel] * curve.mse[sel] / tr
    se = n[sel] * curve.se[sel] / tr
    term = float(ratio[-1])
    return FirstOrderCheck(n[sel], ratio, term, (term - 1.96 * se[-1], term + 1.96 * se[-1]),
                           float(ratio.max() / ratio.min() - 1.0))


@dataclass
class ProbeResult:
    status: str
    fit: RateFit | None
    noise_floor: float
    kept: list
    slope_bound: float = -1.05

    @property
    def slope_ok(self):
        return self.fit is not None and self.fit.slope <= self.slope_bound

    def to_dict(self):
        return {"status": self.status, "fit": None if self.fit is None else self.fit.to_dict(),
                "noise_floor": self.noise_floor, "kept": [int(k) for k in self.kept],
                "slope_bound": self.slope_bound, "slope_ok": self.slope_ok}


def second_order_probe(curve: MseCurve, spectral, trim=0.3, min_points=3, n_min=None) -> ProbeResult:
    """Fit the decay of ``|mse(n) - Tr(Sigma*)/n|``.

    Checkpoints where the standard error exceeds ``trim`` times the
    residual are dropped as noise-dominated. With fewer than ``min_points``
    left the probe is ``inconclusive`` and reports the noise floor (median
    standard error relative to ``Tr(Sigma*)/n`` over the dropped points).
    """
    tr = spectral.trace_sigma if hasattr(spectral, "trace_sigma") else float(spectral)
    n = curve.n.astype(float)
    resid = np.abs(curve.mse - tr / n)
    keep = (resid > 0) & (curve.se <= trim * resid)
    if n_min is not None:
        keep &= n >= n_min
    dropped = ~keep
    floor = float(np.median(curve.se[dropped] * n[dropped] / tr)) if dropped.any() else 0.0
    if keep.sum() < min_points:
        return ProbeResult("inconclusive", None, floor, n[keep].tolist())
    fit = fit_rate(n[keep], resid[keep])
    return ProbeResult("ok", fit, floor, n[keep].tolist())
