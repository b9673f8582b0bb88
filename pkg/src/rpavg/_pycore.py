"""Pure-Python twin of the compiled inner loops.

Loops run over steps; replications are vectorised with numpy. The arithmetic
mirrors ``_core.pyx`` operation by operation so that both backends agree to
the last bit on the quantile and least-squares kernels (the logistic kernel
goes through ``exp`` and may differ by a few ulps).
"""

import numpy as np

NAME = "python"


def _accumulate(s, c, x):
    t = s + x
    big = np.abs(s) >= np.abs(x)
    c += np.where(big, (s - t) + x, (x - t) + s)
    s[...] = t


def quantile_advance(e, acc, comp, noise, steps, level, skip):
    th = e.copy()
    for k in range(steps.shape[0]):
        ind = (noise[:, k] <= th).astype(np.float64)
        th = th - steps[k] * (ind - level)
        if k >= skip:
            _accumulate(acc, comp, th)
    e[...] = th


def linear_advance(e, acc, comp, noise, steps, H, skip):
    d = e.shape[1]
    for k in range(steps.shape[0]):
        buf = np.empty_like(e)
        for i in range(d):
            g = np.zeros(e.shape[0])
            for j in range(d):
                g = g + H[i, j] * e[:, j]
            buf[:, i] = g - noise[:, k, i]
        e -= steps[k] * buf
        if k >= skip:
            _accumulate(acc, comp, e)


def logistic_advance(e, acc, comp, x, y, steps, theta_star, skip):
    d = e.shape[1]
    for k in range(steps.shape[0]):
        yk = y[:, k]
        t = np.zeros(e.shape[0])
        for i in range(d):
            t = t + (theta_star[i] + e[:, i]) * x[:, k, i]
        t = yk * t
        z = np.exp(-np.abs(t))
        w = np.where(t > 0, z / (1.0 + z), 1.0 / (1.0 + z))
        for i in range(d):
            e[:, i] = e[:, i] + steps[k] * (yk * x[:, k, i] * w)
        if k >= skip:
            _accumulate(acc, comp, e)


def affine_recurrence(a, b, u0):
    out = np.empty(a.shape[0] + 1)
    cur = float(u0)
    out[0] = cur
    for k in range(a.shape[0]):
        cur = a[k] * cur + b[k]
        out[k + 1] = cur
    return out


def compensated_cumsum(x):
    out = np.empty(x.shape[0])
    s = c = 0.0
    for k in range(x.shape[0]):
        xk = x[k]
        t = s + xk
        if abs(s) >= abs(xk):
            c += (s - t) + xk
        else:
            c += (xk - t) + s
        s = t
        out[k] = s + c
    return out
