"""Singular kernels, the localized maximal operator and the ``D_h`` average.

Kernel family
-------------
``K_h(x) = (h + |x|)^-a`` for ``|x| <= 1/2``; on ``1/2 < |x| < 2/3`` it is
blended (C^2 smoothstep) into a fixed, h-independent profile
``G(r) = q(4 (3/4 - r))`` that vanishes at ``|x| = 3/4``. On the torus the
kernel is evaluated at the minimum-image displacement, so in 1-d only the
power branch is ever sampled.

``K_{h0} = int_{h0}^1 Kbar_h dh/h`` uses ``m`` geometric nodes with the
midpoint rule in ``log h``.

Normalisation has two modes. ``"grid"`` divides by the discrete L1 norm
(so ``Kbar_h`` sums to one on the grid) and refuses grids coarser than
``h/2``. ``"continuum"`` divides by the exact L1 norm and accepts any grid;
the compactness moduli use it on coarse grids.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import integrate

from .fields import PeriodicGrid, ScalarField, VectorField, _jacobian_norm_array, _grad_array

__all__ = [
    "KernelSpec",
    "ResolutionError",
    "kernel_profile",
    "kernel_field",
    "kernel_l1",
    "normalized_kernel",
    "integrated_kernel",
    "log_nodes",
    "radius_ladder",
    "maximal_op",
    "dh_op",
    "gradient_magnitude",
    "compare_dh_max",
    "verify_pointwise_lemma",
    "square_function_stat",
    "random_bandlimited",
    "refinement_ratio_ok",
]


class ResolutionError(ValueError):
    """The grid cannot resolve the requested kernel scale."""


@dataclass(frozen=True)
class KernelSpec:
    """Kernel exponent plus either a single scale ``h`` or an integrated ``h0``.

    ``m`` is the number of log-spaced quadrature nodes used for ``h0``.
    """

    a: float = 2.0
    h: Optional[float] = None
    h0: Optional[float] = None
    m: int = 32

    def check(self, grid: PeriodicGrid) -> None:
        if not self.a > grid.dim:
            raise ValueError(f"kernel exponent a={self.a} must exceed dim={grid.dim}")


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s**3 * (10.0 - 15.0 * s + 6.0 * s * s)


def kernel_profile(r, h: float, a: float) -> np.ndarray:
    """Radial profile of ``K_h``; see the module docstring."""
    r = np.asarray(r, dtype=float)
    power = (h + r) ** (-a)
    outer = _smoothstep(4.0 * (0.75 - r))
    blend = _smoothstep(6.0 * (r - 0.5))
    mid = (1.0 - blend) * power + blend * outer
    return np.where(r <= 0.5, power, np.where(r < 2.0 / 3.0, mid, np.where(r < 0.75, outer, 0.0)))


def kernel_field(spec: KernelSpec, grid: PeriodicGrid, h: Optional[float] = None) -> ScalarField:
    """Samples of ``K_h`` at the grid's minimum-image displacements."""
    h = spec.h if h is None else h
    if h is None or not 0 < h < 0.5:
        raise ValueError(f"single-scale kernel needs h in (0, 1/2), got {h}")
    spec.check(grid)
    return ScalarField(grid, kernel_profile(grid.displacement(), h, spec.a))


def _angular_measure(r: float) -> float:
    # length of the circle of radius r inside the square [-1/2, 1/2]^2
    if r <= 0.5:
        return 2.0 * math.pi * r
    if r >= math.sqrt(0.5):
        return 0.0
    return r * (2.0 * math.pi - 8.0 * math.acos(0.5 / r))


def _l1_continuum(h: float, a: float, dim: int) -> float:
    if dim == 1:
        return 2.0 * (h ** (1.0 - a) - (h + 0.5) ** (1.0 - a)) / (a - 1.0)
    inner = (2.0 * math.pi) * integrate.quad(
        lambda r: r * (h + r) ** (-a), 0.0, 0.5, epsabs=0.0, epsrel=1e-12, limit=200,
        points=[min(h, 0.25)])[0]
    outer = integrate.quad(
        lambda r: _angular_measure(r) * float(kernel_profile(r, h, a)),
        0.5, math.sqrt(0.5), epsabs=0.0, epsrel=1e-12, limit=200, points=[2.0 / 3.0])[0]
    return inner + outer


def _l1_grid(h: float, a: float, grid: PeriodicGrid) -> float:
    return float(kernel_profile(grid.displacement(), h, a).sum() * grid.cell_volume)


def _require_resolution(grid: PeriodicGrid, h: float) -> None:
    if grid.spacing > 0.5 * h:
        raise ResolutionError(
            f"grid spacing {grid.spacing:.3g} exceeds h/2 = {0.5 * h:.3g}; "
            f"need n >= {2 ** math.ceil(math.log2(2.0 / h))}"
        )


def kernel_l1(spec: KernelSpec, grid: PeriodicGrid, h: Optional[float] = None,
              normalization: str = "grid") -> float:
    """L1 norm of ``K_h`` by grid quadrature (or exactly, ``"continuum"``)."""
    h = spec.h if h is None else h
    spec.check(grid)
    if normalization == "continuum":
        return _l1_continuum(h, spec.a, grid.dim)
    _require_resolution(grid, h)
    return _l1_grid(h, spec.a, grid)


def normalized_kernel(spec: KernelSpec, grid: PeriodicGrid) -> ScalarField:
    """``Kbar_h = K_h / ||K_h||_1``; integrates to one on the grid."""
    K = kernel_field(spec, grid)
    return ScalarField(grid, K.values / kernel_l1(spec, grid))


def log_nodes(h0: float, m: int) -> tuple:
    """Midpoint nodes and weights in ``log h`` on ``(h0, 1)``.

    The weights sum to ``|log h0|``.
    """
    if not 0 < h0 < 1:
        raise ValueError(f"h0 must lie in (0, 1), got {h0}")
    if m < 1:
        raise ValueError("need at least one node")
    width = -math.log(h0) / m
    s = math.log(h0) + width * (np.arange(m) + 0.5)
    return np.exp(s), np.full(m, width)


def integrated_kernel(spec: KernelSpec, grid: PeriodicGrid,
                      normalization: str = "grid") -> ScalarField:
    """``K_{h0}(x) = int_{h0}^1 Kbar_h(x) dh/h`` by log-midpoint quadrature."""
    if spec.h0 is None:
        raise ValueError("integrated kernel needs h0")
    spec.check(grid)
    hs, wts = log_nodes(spec.h0, spec.m)
    r = grid.displacement()
    acc = np.zeros(grid.shape)
    for h, w in zip(hs, wts):
        if normalization == "grid":
            _require_resolution(grid, h)
            norm = _l1_grid(h, spec.a, grid)
        elif normalization == "continuum":
            norm = _l1_continuum(h, spec.a, grid.dim)
        else:
            raise ValueError(f"unknown normalization {normalization!r}")
        acc += w * kernel_profile(r, h, spec.a) / norm
    return ScalarField(grid, acc)


# --- maximal operator ----------------------------------------------------------

def radius_ladder(grid: PeriodicGrid) -> np.ndarray:
    """Dyadic radii ``spacing * 2^k`` up to and including 1."""
    return grid.spacing * 2.0 ** np.arange(int(math.log2(grid.n)) + 1)


def _window_sums_1d(f: np.ndarray, m: int) -> np.ndarray:
    """Trapezoid sum ``sum_{|j|<m} f[i+j] + (f[i+m] + f[i-m])/2`` (periodic), ``m <= n``.

    Divided by ``2m`` it is the quadrature of the average over ``[x-r, x+r]``
    with ``r = m * spacing``; at ``r = 1`` it is exactly the mean.
    """
    n = f.size
    c = np.concatenate([[0.0], np.cumsum(np.tile(f, 4))])
    i = np.arange(n) + 2 * n
    return c[i + m] - c[i - m + 1] + 0.5 * (np.roll(f, -m) + np.roll(f, m))


def _disc_offsets(m: float):
    r = int(math.floor(m))
    a = np.arange(-r, r + 1)
    A, B = np.meshgrid(a, a, indexing="ij")
    rr = np.hypot(A, B)
    keep = rr <= m + 1e-12
    return A[keep], B[keep], rr[keep]


def _circular_conv(f: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.fft.ifftn(np.fft.fftn(f) * np.fft.fftn(mask)).real


def _ball_masks_2d(n: int, m: float):
    A, B, _ = _disc_offsets(m)
    mask = np.zeros((n, n))
    np.add.at(mask, (A % n, B % n), 1.0)
    return mask, A.size


def maximal_op(f: ScalarField) -> ScalarField:
    """Localized maximal function over the dyadic radius ladder.

    ``Mf(x) = max_r`` of the average of ``f`` over the ball of radius ``r``
    in ``R^d`` around ``x``, with ``f`` extended periodically (balls wider
    than the torus wrap). 1-d averages use trapezoid end weights; 2-d
    averages use the lattice points of the disc.
    """
    vals = f.values
    if np.any(vals < 0):
        raise ValueError("maximal_op needs a non-negative field")
    grid = f.grid
    best = np.zeros(grid.shape)
    for k in range(int(math.log2(grid.n)) + 1):
        m = 2**k
        if grid.dim == 1:
            avg = _window_sums_1d(vals, m) / (2 * m)
        else:
            mask, count = _ball_masks_2d(grid.n, m)
            avg = _circular_conv(vals, mask) / count
        np.maximum(best, avg, out=best)
    return ScalarField(grid, best)


# --- D_h -----------------------------------------------------------------------

def _dh_kernel(grid: PeriodicGrid, h: float) -> np.ndarray:
    """Lattice weights of ``1_{|z|<=h} / (h |z|^(d-1))`` with exact mass ``kappa_d``."""
    n, dx = grid.n, grid.spacing
    mask = np.zeros(grid.shape)
    if grid.dim == 1:
        r = int(math.ceil(h / dx + 0.5))
        j = np.arange(-r, r + 1)
        lo = np.maximum(j * dx - 0.5 * dx, -h)
        hi = np.minimum(j * dx + 0.5 * dx, h)
        cover = np.clip(hi - lo, 0.0, None) / h
        np.add.at(mask, j % n, cover)
        return mask
    A, B, rr = _disc_offsets(h / dx)
    # cell integral of 1/|z|: dx^2/|z| off the centre, 4 asinh(1) dx on it
    w = dx * np.where(rr > 0, 1.0 / np.where(rr > 0, rr, 1.0), 4.0 * math.asinh(1.0))
    np.add.at(mask, (A % n, B % n), w)
    return mask * (2.0 * math.pi / mask.sum())


def dh_op(gradmag: ScalarField, h: float) -> ScalarField:
    """``D_h g(x) = (1/h) int_{|z|<=h} g(x+z) |z|^(1-d) dz``, by FFT convolution."""
    grid = gradmag.grid
    if h < grid.spacing:
        raise ValueError(f"h={h} is below the grid spacing {grid.spacing}")
    if np.any(gradmag.values < 0):
        raise ValueError("dh_op needs a non-negative field")
    out = _circular_conv(gradmag.values, _dh_kernel(grid, h))
    return ScalarField(grid, np.clip(out, 0.0, None))


def _dh_1d_integer(g: np.ndarray, m: int) -> np.ndarray:
    """``D_h`` at ``h = m * spacing`` in 1-d via prefix sums (trapezoid ends)."""
    n = g.size
    c = np.concatenate([[0.0], np.cumsum(np.tile(g, 3))])
    i = np.arange(n) + n
    core = c[i + m] - c[i - m + 1]
    ends = 0.5 * (np.roll(g, -m) + np.roll(g, m))
    return (core + ends) / m


def gradient_magnitude(u: Union[ScalarField, VectorField]) -> ScalarField:
    """``|grad u|`` (Frobenius norm for vector fields)."""
    if isinstance(u, ScalarField):
        return ScalarField(u.grid, np.sqrt(np.sum(_grad_array(u.values, u.grid) ** 2, axis=0)))
    return ScalarField(u.grid, _jacobian_norm_array(u.values, u.grid))


# --- lemma verifiers -----------------------------------------------------------

def compare_dh_max(f: ScalarField, hs=None) -> dict:
    """Largest ``D_h f / M f`` over the grid and the dyadic ``h`` ladder.

    Points where both vanish are skipped. Returns the overall ratio and the
    per-``h`` maxima.
    """
    Mf = maximal_op(f).values
    hs = radius_ladder(f.grid) if hs is None else np.asarray(hs, dtype=float)
    per_h = []
    for h in hs:
        D = dh_op(f, float(h)).values
        live = Mf > 0
        if np.any((~live) & (D > 0)):
            per_h.append(math.inf)
            continue
        per_h.append(float(np.max(D[live] / Mf[live])) if live.any() else 0.0)
    return {"ratio": max(per_h) if per_h else 0.0, "h": hs.tolist(), "per_h": per_h}


def _pair_indices(grid: PeriodicGrid, pairs: int, rng: np.random.Generator):
    # continuous positions snapped to the grid: the same seed gives the same
    # physical pairs at every resolution
    pts = rng.random((2, pairs, grid.dim))
    return np.floor(pts * grid.n).astype(np.int64) % grid.n


def verify_pointwise_lemma(u: Union[ScalarField, VectorField], pairs: int = 10_000,
                           seed: int = 0) -> dict:
    """Estimate the constant in ``|u(x)-u(y)| <= C|x-y| (D u(x) + D u(y))``.

    ``D`` is taken at scale ``h = |x - y|``. Pairs with a vanishing
    denominator are skipped when the numerator vanishes too and flagged
    otherwise (a flagged pair makes ``C_hat`` infinite).
    """
    grid = u.grid
    rng = np.random.default_rng(seed)
    idx = _pair_indices(grid, pairs, rng)
    vals = u.values if isinstance(u, VectorField) else u.values[None]
    g = gradient_magnitude(u).values
    n, dx = grid.n, grid.spacing

    if grid.dim == 1:
        i, j = idx[0, :, 0], idx[1, :, 0]
        diff = np.abs(vals[:, i] - vals[:, j])
        num = np.sqrt(np.sum(diff**2, axis=0))
        m = np.abs(i - j)
        m = np.minimum(m, n - m)
        h = m * dx
        Dx = np.zeros(pairs)
        Dy = np.zeros(pairs)
        for mm in np.unique(m[m > 0]):
            sel = m == mm
            D = _dh_1d_integer(g, int(mm))
            Dx[sel], Dy[sel] = D[i[sel]], D[j[sel]]
    else:
        ix, jx = idx[0], idx[1]
        num = np.sqrt(np.sum(
            (vals[:, ix[:, 0], ix[:, 1]] - vals[:, jx[:, 0], jx[:, 1]]) ** 2, axis=0))
        d = np.abs(ix - jx)
        d = np.minimum(d, n - d)
        r2 = d[:, 0] ** 2 + d[:, 1] ** 2
        h = np.sqrt(r2) * dx
        Dx = np.zeros(pairs)
        Dy = np.zeros(pairs)
        field = ScalarField(grid, g)
        for q in np.unique(r2[r2 > 0]):
            sel = r2 == q
            D = dh_op(field, math.sqrt(q) * dx).values
            Dx[sel] = D[ix[sel, 0], ix[sel, 1]]
            Dy[sel] = D[jx[sel, 0], jx[sel, 1]]

    den = h * (Dx + Dy)
    zero_den = den <= 0
    flagged = int(np.count_nonzero(zero_den & (num > 1e-14)))
    skipped = int(np.count_nonzero(zero_den & (num <= 1e-14)))
    ok = ~zero_den
    c_hat = float(np.max(num[ok] / den[ok])) if ok.any() else 0.0
    if flagged:
        c_hat = math.inf
    return {"C_hat": c_hat, "pairs": pairs, "skipped": skipped, "flagged": flagged}


def _shift_defect_1d(g: np.ndarray, dx: float) -> np.ndarray:
    """``F(m) = || D_{m dx} g - D_{m dx} g(. + m dx) ||_2`` for every lag ``m``."""
    n = g.size
    F = np.zeros(n)
    for m in range(1, n // 2 + 1):
        D = _dh_1d_integer(g, m)
        val = math.sqrt(np.mean((D - np.roll(D, -m)) ** 2))
        F[m] = val
        F[(n - m) % n] = val
    return F


def _shift_defect_2d(g: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    n, dx = grid.n, grid.spacing
    a = np.arange(n)
    a = np.minimum(a, n - a)
    r2 = a[:, None] ** 2 + a[None, :] ** 2
    F = np.zeros((n, n))
    field = ScalarField(grid, g)
    for q in np.unique(r2[r2 > 0]):
        D = dh_op(field, math.sqrt(q) * dx).values
        Dh = np.fft.fftn(D)
        auto = np.fft.ifftn(np.abs(Dh) ** 2).real / D.size
        sel = r2 == q
        # ||D - D(.+z)||^2 = 2 (A(0) - A(z)) with A the autocorrelation
        F[sel] = np.sqrt(np.clip(2.0 * (auto.flat[0] - auto[sel]), 0.0, None))
    return F


def square_function_stat(u: Union[ScalarField, VectorField], h0: float,
                         spec: Optional[KernelSpec] = None,
                         normalization: str = "grid") -> dict:
    """Normalised square-function quantity for ``D_|z| u``.

    Computes ``LHS = int K_{h0}(z) ||D_|z| u - D_|z| u(. + z)||_2 dz`` (the
    ``dh/h`` integral folded into ``K_{h0}``) and returns it together with
    ``stat = LHS / (|log h0|^(1/2) ||u||_H1)``.
    """
    from .fields import norms

    if not 0 < h0 < 0.25:
        raise ValueError(f"h0 must lie in (0, 1/4), got {h0}")
    grid = u.grid
    spec = KernelSpec(a=grid.dim + 1.0, h0=h0) if spec is None else KernelSpec(spec.a, h0=h0, m=spec.m)
    Kh0 = integrated_kernel(spec, grid, normalization=normalization).values
    g = gradient_magnitude(u).values
    h1 = norms(u, "H1")
    if h1 == 0 or not np.any(g > 0):
        return {"stat": 0.0, "lhs": 0.0, "h1": h1, "h0": h0}
    F = _shift_defect_1d(g, grid.spacing) if grid.dim == 1 else _shift_defect_2d(g, grid)
    lhs = float(np.sum(Kh0 * F) * grid.cell_volume)
    stat = lhs / (math.sqrt(-math.log(h0)) * h1)
    return {"stat": stat, "lhs": lhs, "h1": h1, "h0": h0}


# --- ensembles -------------------------------------------------------------------

def random_bandlimited(grid: PeriodicGrid, seed: int, kmax: int = 8, decay: float = 1.5,
                       components: int = 1, amplitude: float = 1.0):
    """Random trigonometric polynomial with ``|xi| <= kmax`` and ``|xi|^-decay`` amplitudes.

    Coefficients depend only on ``seed``, so the same function is sampled at
    every resolution. ``components > 1`` returns a :class:`VectorField`
    (``components`` must then equal ``grid.dim``).
    """
    rng = np.random.default_rng(seed)
    coords = grid.coords()
    ks = np.arange(-kmax, kmax + 1)
    if grid.dim == 1:
        modes = [(k,) for k in range(1, kmax + 1)]
    else:
        modes = [(k1, k2) for k1 in ks for k2 in ks if (k1, k2) > (0, 0) and abs(k1) + abs(k2) > 0]
    out = []
    for _ in range(components):
        acc = np.zeros(grid.shape)
        for mode in modes:
            a, b = rng.standard_normal(2)
            phase = 2.0 * math.pi * sum(k * x for k, x in zip(mode, coords))
            acc += (a * np.cos(phase) + b * np.sin(phase)) / math.hypot(*mode) ** decay
        out.append(amplitude * acc)
    if components == 1:
        return ScalarField(grid, out[0])
    return VectorField(grid, np.stack(out))


def refinement_ratio_ok(coarse: float, fine: float, lo: float = 0.8, hi: float = 1.25) -> bool:
    """Stability verdict for a constant measured at two resolutions."""
    if coarse == 0 and fine == 0:
        return True
    if coarse == 0 or not math.isfinite(coarse) or not math.isfinite(fine):
        return False
    return lo <= fine / coarse <= hi
