# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops.

Every routine here has a line-for-line twin in ``_pycore``; both consume the
same pre-generated noise arrays and step sizes, so the two backends follow
the same floating-point path. Iterates are stored as deviations from the
minimiser and the running sums use Neumaier compensation.
"""

from libc.math cimport exp, fabs

NAME = "compiled"


cdef inline void _accumulate(double *s, double *c, double x) noexcept nogil:
    cdef double t = s[0] + x
    if fabs(s[0]) >= fabs(x):
        c[0] += (s[0] - t) + x
    else:
        c[0] += (x - t) + s[0]
    s[0] = t


def quantile_advance(double[::1] e, double[::1] acc, double[::1] comp,
                     const double[:, ::1] noise, const double[::1] steps,
                     double level, Py_ssize_t skip):
    """Advance ``e`` through ``steps.shape[0]`` quantile updates.

    ``noise`` holds centred draws x - q; the first ``skip`` steps of the
    block are excluded from the running sum (burn-in).
    """
    cdef Py_ssize_t R = e.shape[0], m = steps.shape[0]
    cdef Py_ssize_t r, k
    cdef double th, ind
    with nogil:
        for r in range(R):
            th = e[r]
            for k in range(m):
                ind = 1.0 if noise[r, k] <= th else 0.0
                th = th - steps[k] * (ind - level)
                if k >= skip:
                    _accumulate(&acc[r], &comp[r], th)
            e[r] = th


def linear_advance(double[:, ::1] e, double[:, ::1] acc, double[:, ::1] comp,
                   const double[:, :, ::1] noise, const double[::1] steps,
                   const double[:, ::1] H, Py_ssize_t skip):
    """Least-squares updates e <- e - step * (H e - noise)."""
    cdef Py_ssize_t R = e.shape[0], d = e.shape[1], m = steps.shape[0]
    cdef Py_ssize_t r, k, i, j
    cdef double g
    cdef double buf[64]
    if d > 64:
        raise ValueError("linear kernel supports dim <= 64")
    with nogil:
        for r in range(R):
            for k in range(m):
                for i in range(d):
                    g = 0.0
                    for j in range(d):
                        g = g + H[i, j] * e[r, j]
                    buf[i] = g - noise[r, k, i]
                for i in range(d):
                    e[r, i] = e[r, i] - steps[k] * buf[i]
                if k >= skip:
                    for i in range(d):
                        _accumulate(&acc[r, i], &comp[r, i], e[r, i])


def logistic_advance(double[:, ::1] e, double[:, ::1] acc, double[:, ::1] comp,
                     const double[:, :, ::1] x, const double[:, ::1] y,
                     const double[::1] steps, const double[::1] theta_star,
                     Py_ssize_t skip):
    """Logistic updates theta <- theta + step * y x / (1 + exp(y <theta, x>))."""
    cdef Py_ssize_t R = e.shape[0], d = e.shape[1], m = steps.shape[0]
    cdef Py_ssize_t r, k, i
    cdef double t, z, w, yk
    with nogil:
        for r in range(R):
            for k in range(m):
                yk = y[r, k]
                t = 0.0
                for i in range(d):
                    t = t + (theta_star[i] + e[r, i]) * x[r, k, i]
                t = yk * t
                z = exp(-fabs(t))
                if t > 0:
                    w = z / (1.0 + z)
                else:
                    w = 1.0 / (1.0 + z)
                for i in range(d):
                    e[r, i] = e[r, i] + steps[k] * (yk * x[r, k, i] * w)
                if k >= skip:
                    for i in range(d):
                        _accumulate(&acc[r, i], &comp[r, i], e[r, i])


def affine_recurrence(const double[::1] a, const double[::1] b, double u0):
    """Return u with u[0] = u0 and u[k+1] = a[k] * u[k] + b[k]."""
    import numpy as np
    cdef Py_ssize_t m = a.shape[0], k
    out = np.empty(m + 1)
    cdef double[::1] u = out
    cdef double cur = u0
    with nogil:
        u[0] = cur
        for k in range(m):
            cur = a[k] * cur + b[k]
            u[k + 1] = cur
    return out


def compensated_cumsum(const double[::1] x):
    """Running sums with Neumaier compensation."""
    import numpy as np
    cdef Py_ssize_t m = x.shape[0], k
    out = np.empty(m)
    cdef double[::1] o = out
    cdef double s = 0.0, c = 0.0
    with nogil:
        for k in range(m):
            _accumulate(&s, &c, x[k])
            o[k] = s + c
    return out
