# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: logistic loss family and the entry-wise z-update."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, fabs, fmax

cnp.import_array()

cdef double SOFTPLUS_CUTOFF = 30.0
cdef double EPS = 2.220446049250313e-16


cdef inline double _softplus(double t) nogil:
    if t >= SOFTPLUS_CUTOFF:
        return t
    return log1p(exp(t))


cdef inline double _sigmoid(double t) nogil:
    cdef double e
    if t >= 0:
        return 1.0 / (1.0 + exp(-t))
    e = exp(t)
    return e / (1.0 + e)


def logistic_loss(const double[::1] z, const double[::1] labels, double scale):
    cdef Py_ssize_t i, n = z.shape[0]
    cdef double acc = 0.0
    with nogil:
        for i in range(n):
            acc += _softplus(-labels[i] * z[i])
    return scale * acc


def logistic_grad(const double[::1] z, const double[::1] labels, double scale):
    cdef Py_ssize_t i, n = z.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = scale * (-labels[i] * _sigmoid(-labels[i] * z[i]))
    return out


def logistic_curv(const double[::1] z, const double[::1] labels, double scale):
    cdef Py_ssize_t i, n = z.shape[0]
    cdef double s
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            s = _sigmoid(-labels[i] * z[i])
            o[i] = scale * s * (1.0 - s)
    return out


def zstep(const double[::1] w, const double[::1] y, const double[::1] labels,
          double rho, double scale, double tol, int max_iter):
    cdef Py_ssize_t i, n = w.shape[0]
    cdef int k
    cdef double zi, lo, hi, s, d, h, nxt, yl
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] z = out
    with nogil:
        for i in range(n):
            zi = w[i] + y[i] / rho
            if scale == 0.0:
                z[i] = zi
                continue
            lo = w[i] + (y[i] - scale) / rho
            hi = w[i] + (y[i] + scale) / rho
            yl = labels[i]
            for k in range(max_iter):
                s = _sigmoid(-yl * zi)
                d = scale * (-yl * s) - y[i] + rho * (zi - w[i])
                if fabs(d) <= tol:
                    break
                if d < 0:
                    lo = zi
                else:
                    hi = zi
                h = scale * s * (1.0 - s) + rho
                nxt = zi - d / h
                if nxt <= lo or nxt >= hi:
                    nxt = 0.5 * (lo + hi)
                zi = nxt
                if hi - lo <= 4.0 * EPS * fmax(1.0, fabs(zi)):
                    break
            z[i] = zi
    return out
