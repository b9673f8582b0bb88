"""Robbins-Monro iterations with online Ruppert-Polyak averaging.

Two paths share the same arithmetic:

* ``rm_step`` / ``RunState``: one step at a time in the original coordinates,
  convenient for tests and small experiments;
* ``simulate`` / ``run``: blocks of steps through the compiled kernels, with
  iterates stored as deviations ``theta - theta_star`` and compensated running
  sums for the average.

Noise is drawn in fixed blocks of ``BLOCK`` steps per replication regardless
of checkpoints or ``n_max``, so a trajectory prefix depends only on the seed.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _pycore
from ._backend import get_core
from .schedule import StepSchedule

log = logging.getLogger(__name__)

BLOCK = 8192
DIVERGENCE_BOUND = 1e15


class DivergenceError(RuntimeError):
    """Iterate left the finite range; carries the step index and last value."""

    def __init__(self, n, theta, replication=None):
        where = "" if replication is None else f" (replication {replication})"
        super().__init__(f"iterate diverged at step {n}{where}: |theta| = {np.linalg.norm(theta):.3g}")
        self.n = n
        self.theta = np.asarray(theta)
        self.replication = replication


def _check_finite(theta, n):
    if not np.all(np.isfinite(theta)) or np.max(np.abs(theta)) > DIVERGENCE_BOUND:
        raise DivergenceError(n, theta)


def average_update(theta_bar, theta_next, n_next):
    """``theta_bar + (theta_next - theta_bar) / n_next``."""
    if n_next < 1:
        raise ValueError("n_next must be >= 1")
    theta_bar = np.asarray(theta_bar, dtype=float)
    return theta_bar + (np.asarray(theta_next, dtype=float) - theta_bar) / n_next


@dataclass
class RunState:
    """Iterate, running average and step counter of one replication.

    The average is kept as a compensated sum of the iterates after
    ``burn_in`` so that long runs reproduce the batch mean to ~1e-15.
    """

    schedule: StepSchedule
    theta: np.ndarray
    n: int = 0
    burn_in: int = 0
    recorder: list | None = None
    _sum: np.ndarray = field(init=False, repr=False)
    _comp: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=float, ndmin=1)
        self._sum = np.zeros_like(self.theta)
        self._comp = np.zeros_like(self.theta)

    @property
    def averaged(self):
        return self.n - self.burn_in

    @property
    def theta_bar(self):
        if self.averaged <= 0:
            return np.full_like(self.theta, np.nan)
        return (self._sum + self._comp) / self.averaged

    def _push(self, theta):
        _pycore._accumulate(self._sum, self._comp, theta)


def rm_step(state: RunState, problem, rng=None, noise=None) -> RunState:
    """``theta <- theta - gamma_{n+1} * Lambda(theta, Z_{n+1})``, then update the average.

    ``noise`` is one draw as returned row-wise by ``problem.draw_noise``; if
    omitted a fresh draw is taken from ``rng``. The state is modified in
    place and returned.
    """
    if noise is None:
        noise = tuple(a[0] for a in problem.draw_noise(rng, 1))
    g = problem.stochastic_gradient(state.theta, *noise)
    theta = state.theta - state.schedule.step(state.n + 1) * g
    _check_finite(theta, state.n + 1)
    state.theta = theta
    state.n += 1
    if state.n > state.burn_in:
        state._push(theta)
    if state.recorder is not None:
        state.recorder.append((state.n, theta.copy(), state.theta_bar))
    return state


# ---------------------------------------------------------------------------
# block driver


def checkpoint_grid(n_max, per_decade=10):
    """Geometric integer grid on ``[1, n_max]`` that always contains ``n_max``."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    count = max(2, int(np.ceil(np.log10(max(n_max, 10)) * per_decade)) + 1)
    grid = np.unique(np.round(np.logspace(0, np.log10(n_max), count)).astype(np.int64))
    return grid


def _normalise_checkpoints(checkpoints, n_max):
    if checkpoints is None:
        checkpoints = checkpoint_grid(n_max)
    cps = np.asarray(checkpoints, dtype=np.int64).reshape(-1)
    if cps.size == 0:
        raise ValueError("need at least one checkpoint")
    if np.any(np.diff(cps) <= 0):
        raise ValueError("checkpoints must be strictly increasing")
    if cps[0] < 1 or cps[-1] > n_max:
        raise ValueError(f"checkpoints must lie in [1, {n_max}]")
    return cps


@dataclass
class SimulationResult:
    """Per-replication snapshots, in deviation coordinates.

    ``raw[r, j]`` is ``theta_{n_j} - theta_star`` and ``avg[r, j]`` is
    ``theta_bar_{n_j} - theta_star`` (NaN before any averaged iterate).
    Diverged replications carry NaN from the divergence onwards.
    """

    checkpoints: np.ndarray
    raw: np.ndarray
    avg: np.ndarray
    diverged: np.ndarray
    divergence_step: np.ndarray
    theta_star: np.ndarray
    burn_in: int = 0

    @property
    def replications(self):
        return self.raw.shape[0]


def _stack_noise(problem, rngs):
    draws = [problem.draw_noise(rng, BLOCK) for rng in rngs]
    return tuple(np.ascontiguousarray(np.stack(parts)) for parts in zip(*draws))


def _generic_advance(problem, e, acc, comp, noise, steps, skip):
    # per-step Python loop for problems without a compiled kernel
    ts = problem.theta_star
    for k in range(steps.shape[0]):
        z = tuple(a[:, k] for a in noise)
        e -= steps[k] * problem.stochastic_gradient_batch(ts + e, *z)
        if k >= skip:
            _pycore._accumulate(acc, comp, e)


def _advance(core, problem, e, acc, comp, noise, steps, skip):
    kind = problem.kernel
    args = problem.kernel_args()
    if kind == "quantile":
        core.quantile_advance(e[:, 0], acc[:, 0], comp[:, 0], noise[0], steps, args[0], skip)
    elif kind == "linear":
        core.linear_advance(e, acc, comp, noise[0], steps, args[0], skip)
    elif kind == "logistic":
        core.logistic_advance(e, acc, comp, noise[0], noise[1], steps, args[0], skip)
    else:
        _generic_advance(problem, e, acc, comp, noise, steps, skip)


def _run_batch(problem, schedule, e0, n_max, rngs, cps, burn_in, core):
    R, d = len(rngs), problem.dim
    e = np.ascontiguousarray(np.repeat(e0[None, :], R, axis=0))
    acc = np.zeros((R, d))
    comp = np.zeros((R, d))
    raw = np.full((R, cps.size, d), np.nan)
    avg = np.full((R, cps.size, d), np.nan)
    dead = np.zeros(R, dtype=bool)
    dead_at = np.zeros(R, dtype=np.int64)
    n = 0
    j = 0
    while n < n_max:
        noise = _stack_noise(problem, rngs)
        blk_end = min(n + BLOCK, n_max)
        off = 0
        while n < blk_end:
            stop = min(blk_end, int(cps[j])) if j < cps.size else blk_end
            m = stop - n
            steps = schedule.steps(n + 1, stop + 1)
            skip = int(min(max(burn_in - n, 0), m))
            sub = tuple(np.ascontiguousarray(a[:, off:off + m]) for a in noise)
            with np.errstate(over="ignore", invalid="ignore"):
                _advance(core, problem, e, acc, comp, sub, steps, skip)
            off += m
            n = stop
            bad = ~dead & (~np.all(np.isfinite(e), axis=1)
                           | (np.nan_to_num(np.abs(e), nan=np.inf).max(axis=1)
                              > DIVERGENCE_BOUND))
            if np.any(bad):
                dead |= bad
                dead_at[bad] = n
                e[bad] = 0.0
                acc[bad] = 0.0
                comp[bad] = 0.0
            if j < cps.size and n == cps[j]:
                raw[:, j] = e
                if n > burn_in:
                    avg[:, j] = (acc + comp) / (n - burn_in)
                raw[dead, j] = np.nan
                avg[dead, j] = np.nan
                j += 1
    return raw, avg, dead, dead_at


def simulate(problem, schedule: StepSchedule, theta0, n_max, seeds, checkpoints=None,
             burn_in=0, backend=None, batch_size=128, workers=1) -> SimulationResult:
    """Run one replication per seed and collect checkpoint snapshots.

    Replications are grouped in batches of ``batch_size``; each batch is an
    independent task, so the output does not depend on ``workers``.
    """
    n_max = int(n_max)
    cps = _normalise_checkpoints(checkpoints, n_max)
    if burn_in < 0 or burn_in >= n_max:
        raise ValueError("burn_in must lie in [0, n_max)")
    core = get_core(backend)
    theta0 = problem.theta_star if theta0 is None else theta0
    e0 = np.array(theta0, dtype=float, ndmin=1) - problem.theta_star
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    chunks = [seeds[i:i + batch_size] for i in range(0, len(seeds), batch_size)]

    def task(chunk):
        rngs = [np.random.default_rng(s) for s in chunk]
        return _run_batch(problem, schedule, e0, n_max, rngs, cps, burn_in, core)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(task, chunks))
    else:
        parts = [task(c) for c in chunks]
    raw, avg, dead, dead_at = (np.concatenate(x) for x in zip(*parts))
    return SimulationResult(cps, raw, avg, dead, dead_at, problem.theta_star.copy(), burn_in)


@dataclass
class TrajectoryRecord:
    """Checkpoint snapshots of one run in the original coordinates."""

    n: np.ndarray
    theta: np.ndarray
    theta_bar: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        if np.any(np.diff(self.n) <= 0):
            raise ValueError("checkpoint indices must be strictly increasing")

    def to_csv(self, path=None, header=None):
        d = self.theta.shape[1]
        buf = io.StringIO()
        for line in header or []:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n"] + [f"theta[{i}]" for i in range(d)] + [f"theta_bar[{i}]" for i in range(d)])
        for k, n in enumerate(self.n):
            w.writerow([int(n)] + [repr(float(v)) for v in self.theta[k]]
                       + [repr(float(v)) for v in self.theta_bar[k]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def run(problem, schedule: StepSchedule, theta0, n_max, rng, checkpoints=None, burn_in=0,
        backend=None) -> TrajectoryRecord:
    """Single replication driven by ``rng``; raises :class:`DivergenceError` on blow-up."""
    n_max = int(n_max)
    cps = _normalise_checkpoints(checkpoints, n_max)
    core = get_core(backend)
    theta0 = problem.theta_star if theta0 is None else theta0
    e0 = np.array(theta0, dtype=float, ndmin=1) - problem.theta_star
    raw, avg, dead, dead_at = _run_batch(problem, schedule, e0, n_max, [rng], cps, burn_in, core)
    if dead[0]:
        raise DivergenceError(int(dead_at[0]), raw[0, -1])
    ts = problem.theta_star
    return TrajectoryRecord(cps, ts + raw[0], ts + avg[0])


def to_records(result: SimulationResult, seeds=None):
    """Split a batch result into per-replication records (diverged ones included as NaN)."""
    ts = result.theta_star
    seeds = [None] * result.replications if seeds is None else list(seeds)
    return [TrajectoryRecord(result.checkpoints, ts + result.raw[r], ts + result.avg[r], seeds[r])
            for r in range(result.replications)]


# ---------------------------------------------------------------------------
# consistency


@dataclass
class ConsistencyCurve:
    n: np.ndarray
    ratio: np.ndarray
    se: np.ndarray
    max_ratio: float
    replications: int
    p: int


def empirical_consistency(result, p, schedule: StepSchedule, theta_star=None,
                          min_replications=100):
    """Curve ``n -> E|theta_n - theta*|^p / gamma_n^{p/2}`` over checkpoints.

    ``result`` is a :class:`SimulationResult` or a list of
    :class:`TrajectoryRecord` sharing the same checkpoints (then
    ``theta_star`` is required). Diverged replications are dropped.
    """
    if p not in (2, 4):
        raise ValueError("p must be 2 or 4")
    if isinstance(result, SimulationResult):
        dev = result.raw[~result.diverged]
        n = result.checkpoints
    else:
        if theta_star is None:
            raise ValueError("theta_star is required for a list of records")
        recs = list(result)
        n = recs[0].n
        dev = np.stack([r.theta for r in recs]) - np.asarray(theta_star, dtype=float)
        dev = dev[np.all(np.isfinite(dev), axis=(1, 2))]
    R = dev.shape[0]
    if R < min_replications:
        warnings.warn(f"only {R} replications; consistency curve has wide uncertainty",
                      RuntimeWarning, stacklevel=2)
    norms = np.sum(dev * dev, axis=2) ** (p / 2)
    gam = schedule.gamma * n.astype(float) ** (-schedule.beta)
    scale = gam ** (p / 2)
    ratio = norms.mean(axis=0) / scale
    se = norms.std(axis=0, ddof=1) / np.sqrt(R) / scale if R > 1 else np.zeros_like(ratio)
    return ConsistencyCurve(n, ratio, se, float(ratio.max()), R, p)
