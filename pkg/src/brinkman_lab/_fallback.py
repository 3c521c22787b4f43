"""Pure-numpy versions of the compiled pair-sum kernels (same signatures)."""
from __future__ import annotations

import numpy as np


def _term(a, b, p):
    d = np.abs(a - b)
    if p == 1.0:
        return d
    if p == 2.0:
        return d * d
    return d**p


def lag_sums_1d(rho, w, p, weighted, threads=1):
    rho = np.ascontiguousarray(rho, dtype=float)
    w = np.ascontiguousarray(w, dtype=float)
    n = rho.shape[0]
    if w.shape[0] != n:
        raise ValueError("rho and w must have the same length")
    out = np.zeros(n)
    for m in range(n):
        t = _term(rho, np.roll(rho, -m), p)
        if weighted:
            t = t * (w + np.roll(w, -m))
        out[m] = t.sum()
    return out


def lag_sums_2d(rho, w, p, weighted, threads=1):
    rho = np.ascontiguousarray(rho, dtype=float)
    w = np.ascontiguousarray(w, dtype=float)
    n = rho.shape[0]
    if rho.shape != (n, n) or w.shape != (n, n):
        raise ValueError("rho and w must be square arrays of one size")
    out = np.zeros((n, n))
    for m1 in range(n):
        r1 = np.roll(rho, -m1, axis=0)
        w1 = np.roll(w, -m1, axis=0)
        for m2 in range(n):
            t = _term(rho, np.roll(r1, -m2, axis=1), p)
            if weighted:
                t = t * (w + np.roll(w1, -m2, axis=1))
            out[m1, m2] = t.sum()
    return out


def pair_terms(rho_x, rho_y, w_x, w_y, p, weighted):
    t = _term(np.asarray(rho_x, float), np.asarray(rho_y, float), p)
    if weighted:
        t = t * (np.asarray(w_x, float) + np.asarray(w_y, float))
    return t
