"""Compare the compiled and pure-Python kernel backends.

Times each inner kernel on identical inputs, then a full ``simulate`` call,
and reports the speed-up and the largest difference between outputs.

    python3 benchmarks/bench_kernels.py [--reps 128] [--steps 8192] [--json out.json]
"""

import argparse
import json
import platform
import time

import numpy as np

from rpavg._backend import get_core
from rpavg.problems import LeastSquaresProblem, LogisticProblem, NormalLaw, QuantileProblem
from rpavg.schedule import StepSchedule
from rpavg.sgd import simulate


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def kernel_cases(R, K, rng):
    steps = StepSchedule(1.0, 0.75).steps(1, K)
    H = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.1], [0.0, 0.1, 0.7]])
    noise_q = rng.normal(size=(R, K))
    noise_l = rng.normal(size=(R, K, 3))
    x = rng.normal(size=(R, K, 2))
    y = np.where(rng.random((R, K)) < 0.5, -1.0, 1.0)
    ts = np.array([1.0, -1.0])
    a = 1.0 - 0.5 * steps
    b = steps ** 2

    def state(d):
        return np.full((R, d), 0.3), np.zeros((R, d)), np.zeros((R, d))

    def quantile(core):
        e = np.full(R, 0.3)
        acc = np.zeros(R)
        comp = np.zeros(R)
        core.quantile_advance(e, acc, comp, noise_q, steps, 0.5, 0)
        return acc + comp

    def linear(core):
        e, acc, comp = state(3)
        core.linear_advance(e, acc, comp, noise_l, steps, H, 0)
        return acc + comp

    def logistic(core):
        e, acc, comp = state(2)
        core.logistic_advance(e, acc, comp, x, y, steps, ts, 0)
        return acc + comp

    def affine(core):
        return core.affine_recurrence(a, b, 1.0)

    def cumsum(core):
        return core.compensated_cumsum(b)

    return {"quantile_advance": quantile, "linear_advance (d=3)": linear,
            "logistic_advance (d=2)": logistic, "affine_recurrence": affine,
            "compensated_cumsum": cumsum}


def simulate_cases(R, n):
    sched = StepSchedule(1.0, 0.75)
    seeds = range(1, R + 1)
    probs = {
        "quantile": (QuantileProblem(NormalLaw(), 0.5), [0.0]),
        "least squares (d=2)": (LeastSquaresProblem(np.array([[2.0, 0.5], [0.5, 1.0]])), [0.0, 0.0]),
        "logistic (d=2)": (LogisticProblem((1.0, -1.0), 2.0, quadrature_draws=2000), [0.0, 0.0]),
    }
    out = {}
    for name, (prob, th0) in probs.items():
        def fn(core, prob=prob, th0=th0):
            r = simulate(prob, sched, th0, n, seeds, backend=core)
            return r.avg
        out[name] = fn
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=128, help="replications per kernel call")
    ap.add_argument("--steps", type=int, default=8192, help="steps per kernel call")
    ap.add_argument("--sim-n", type=int, default=20000, help="n_max of the simulate runs")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args(argv)

    compiled, python = get_core("compiled"), get_core("python")
    rng = np.random.default_rng(0)
    rows = []
    print(f"python {platform.python_version()}, numpy {np.__version__}, {platform.machine()}")
    print(f"{'case':34s} {'compiled s':>11s} {'python s':>11s} {'speed-up':>9s} {'max |diff|':>11s}")
    groups = [("kernel", kernel_cases(args.reps, args.steps, rng)),
              ("simulate", simulate_cases(args.reps, args.sim_n))]
    for group, cases in groups:
        for name, fn in cases.items():
            name_c = "compiled" if group == "simulate" else compiled
            name_p = "python" if group == "simulate" else python
            tc, oc = best_of(lambda: fn(name_c), args.repeat)
            tp, op = best_of(lambda: fn(name_p), args.repeat)
            diff = float(np.max(np.abs(np.asarray(oc) - np.asarray(op))))
            label = f"{group}: {name}"
            print(f"{label:34s} {tc:11.4f} {tp:11.4f} {tp / tc:8.1f}x {diff:11.1e}")
            rows.append({"group": group, "case": name, "compiled_s": tc, "python_s": tp,
                         "speedup": tp / tc, "max_abs_diff": diff})
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"reps": args.reps, "steps": args.steps, "sim_n": args.sim_n, "rows": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
