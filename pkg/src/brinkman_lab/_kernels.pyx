# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled pair-sum kernels.

``lag_sums_*`` return, for every periodic lag ``m``,
``S[m] = sum_i |rho_i - rho_{i+m}|^p * (w_i + w_{i+m})`` (or without the
weight factor when ``weighted`` is false). The moduli are then a single dot
product of ``S`` with the kernel sampled at the lags.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport fabs, pow

cnp.import_array()


cdef inline double _term(double a, double b, double p) noexcept nogil:
    cdef double d = fabs(a - b)
    if p == 1.0:
        return d
    if p == 2.0:
        return d * d
    return pow(d, p)


def lag_sums_1d(const double[::1] rho, const double[::1] w, double p, bint weighted,
                int threads=1):
    cdef Py_ssize_t n = rho.shape[0]
    cdef Py_ssize_t m, i, j
    cdef double acc, t
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] S = out
    if w.shape[0] != n:
        raise ValueError("rho and w must have the same length")
    for m in prange(n, nogil=True, num_threads=threads, schedule="static"):
        acc = 0.0
        for i in range(n):
            j = i + m
            if j >= n:
                j = j - n
            t = _term(rho[i], rho[j], p)
            if weighted:
                t = t * (w[i] + w[j])
            acc = acc + t
        S[m] = acc
    return out


def lag_sums_2d(const double[:, ::1] rho, const double[:, ::1] w, double p, bint weighted,
                int threads=1):
    cdef Py_ssize_t n = rho.shape[0]
    cdef Py_ssize_t lag, m1, m2, i1, i2, j1, j2
    cdef double acc, t
    out = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] S = out
    if rho.shape[1] != n or w.shape[0] != n or w.shape[1] != n:
        raise ValueError("rho and w must be square arrays of one size")
    for lag in prange(n * n, nogil=True, num_threads=threads, schedule="static"):
        m1 = lag // n
        m2 = lag % n
        acc = 0.0
        for i1 in range(n):
            j1 = i1 + m1
            if j1 >= n:
                j1 = j1 - n
            for i2 in range(n):
                j2 = i2 + m2
                if j2 >= n:
                    j2 = j2 - n
                t = _term(rho[i1, i2], rho[j1, j2], p)
                if weighted:
                    t = t * (w[i1, i2] + w[j1, j2])
                acc = acc + t
        S[m1, m2] = acc
    return out


def pair_terms(const double[::1] rho_x, const double[::1] rho_y, const double[::1] w_x,
               const double[::1] w_y, double p, bint weighted):
    """Elementwise ``|rho_x - rho_y|^p (w_x + w_y)`` for sampled pairs."""
    cdef Py_ssize_t k, n = rho_x.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for k in range(n):
        o[k] = _term(rho_x[k], rho_y[k], p)
        if weighted:
            o[k] = o[k] * (w_x[k] + w_y[k])
    return out
