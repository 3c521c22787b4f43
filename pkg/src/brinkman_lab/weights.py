"""The damped transport weight.

``w`` solves ``dw/dt + u . grad w + lambda D w = 0`` with ``w(0) = 1`` and
damping ``D = M|grad u| + |div u| + rho^gamma``. Each step is
semi-Lagrangian: ``w`` is interpolated at the backtracked foot of the
characteristic and multiplied by the exact damping factor
``exp(-lambda D dt)``. Linear interpolation keeps ``0 <= w <= 1``
unconditionally.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .fields import (
    PeriodicGrid,
    ScalarField,
    VectorField,
    _div_array,
    _jacobian_norm_array,
)
from .harmonic import maximal_op

__all__ = [
    "DampingField",
    "WeightFloorWarning",
    "WEIGHT_FLOOR",
    "damping_field",
    "weight_step",
    "log_weight_budget",
    "budget_rate",
    "default_lambda",
]

WEIGHT_FLOOR = 1e-300
WEIGHT_CFL_MAX = 1.0


class WeightFloorWarning(RuntimeWarning):
    """Some weight values fell below the logarithm floor."""


@dataclass(frozen=True)
class DampingField:
    """``D`` together with its three non-negative parts."""

    maximal_part: ScalarField
    div_part: ScalarField
    pressure_part: ScalarField

    @property
    def values(self) -> ScalarField:
        return ScalarField(
            self.maximal_part.grid,
            self.maximal_part.values + self.div_part.values + self.pressure_part.values,
        )


def damping_field(u: VectorField, rho: ScalarField, gamma: float) -> DampingField:
    """Assemble ``D = M|grad u| + |div u| + rho^gamma`` from a velocity and density."""
    if u.grid != rho.grid:
        raise ValueError("u and rho live on different grids")
    grid = u.grid
    grad_norm = ScalarField(grid, _jacobian_norm_array(u.values, grid))
    maximal = maximal_op(grad_norm)
    div = ScalarField(grid, np.abs(_div_array(u.values, grid)))
    pressure = ScalarField(grid, np.clip(rho.values, 0.0, None) ** gamma)
    return DampingField(maximal, div, pressure)


def _interp_linear(w: np.ndarray, foot: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    """Periodic (multi)linear interpolation of ``w`` at ``foot`` (physical coords)."""
    n = grid.n
    s = foot * n
    i0 = np.floor(s).astype(np.int64)
    t = s - i0
    i0 %= n
    i1 = (i0 + 1) % n
    if grid.dim == 1:
        return (1.0 - t[0]) * w[i0[0]] + t[0] * w[i1[0]]
    tx, ty = t
    return ((1 - tx) * (1 - ty) * w[i0[0], i0[1]] + tx * (1 - ty) * w[i1[0], i0[1]]
            + (1 - tx) * ty * w[i0[0], i1[1]] + tx * ty * w[i1[0], i1[1]])


def _interp_spectral(w: np.ndarray, foot: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    """Evaluate the trigonometric interpolant of ``w`` at ``foot`` (direct sum)."""
    n = grid.n
    xi = np.fft.fftfreq(n, d=1.0 / n)
    W = np.fft.fftn(w) / w.size
    if grid.dim == 1:
        f = foot[0].ravel()
        phase = np.exp(2j * np.pi * np.outer(f, xi))
        phase[:, n // 2] = np.cos(np.pi * n * f)  # Nyquist as a real cosine
        return (phase @ W).real.reshape(w.shape)
    ex = np.exp(2j * np.pi * foot[0].ravel()[:, None] * xi[None, :])
    ey = np.exp(2j * np.pi * foot[1].ravel()[:, None] * xi[None, :])
    out = np.einsum("pi,ij,pj->p", ex, W, ey, optimize=True)
    return out.real.reshape(w.shape)


def _sample_velocity(u: np.ndarray, pts: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    return np.stack([_interp_linear(c, pts, grid) for c in u])


def weight_step(w: ScalarField, u: VectorField, D: DampingField | ScalarField,
                lam: float, dt: float, interpolation: str = "linear") -> ScalarField:
    """Advance the weight by one semi-Lagrangian step.

    Parameters
    ----------
    w : ScalarField
        Current weight with values in ``[0, 1]``.
    u : VectorField
        Transport velocity, frozen over the step.
    D : DampingField or ScalarField
        Damping rate evaluated at the start of the step.
    lam : float
        Damping multiplier ``lambda >= 0``.
    dt : float
        Time step. ``dt * max|u| / spacing`` may not exceed 1.
    interpolation : {"linear", "spectral"}
        ``"linear"`` is monotone. ``"spectral"`` is exact for band-limited
        weights and is clamped to ``[0, 1]`` afterwards.
    """
    from .solver import CFLError

    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if dt <= 0:
        raise ValueError("dt must be positive")
    grid = w.grid
    wv = w.values
    if wv.min() < 0 or wv.max() > 1:
        raise ValueError("weight must lie in [0, 1]")
    uv = u.values
    umax = float(np.abs(uv).max()) if uv.size else 0.0
    courant = dt * umax / grid.spacing
    if courant > WEIGHT_CFL_MAX:
        raise CFLError(courant, WEIGHT_CFL_MAX * grid.spacing / umax)

    dvals = D.values.values if isinstance(D, DampingField) else D.values
    if np.any(dvals < 0):
        raise ValueError("damping must be non-negative")

    if umax == 0.0:
        moved = wv
    else:
        x = np.stack(grid.coords())
        mid = x - 0.5 * dt * uv
        foot = x - dt * _sample_velocity(uv, mid, grid)
        if interpolation == "linear":
            moved = _interp_linear(wv, foot, grid)
        elif interpolation == "spectral":
            moved = _interp_spectral(wv, foot, grid)
        else:
            raise ValueError(f"unknown interpolation {interpolation!r}")
        moved = np.clip(moved, 0.0, 1.0)
    out = moved * np.exp(-lam * dvals * dt)
    return ScalarField(grid, out)


def log_weight_budget(rho: ScalarField, w: ScalarField) -> float:
    """``int rho |log w| dx`` with ``w`` floored at ``1e-300``."""
    wv = w.values
    if np.any(wv < WEIGHT_FLOOR):
        warnings.warn(
            f"{int(np.count_nonzero(wv < WEIGHT_FLOOR))} weight values below floor {WEIGHT_FLOOR}",
            WeightFloorWarning, stacklevel=2)
    logs = np.abs(np.log(np.maximum(wv, WEIGHT_FLOOR)))
    return float(np.sum(rho.values * logs) * rho.grid.cell_volume)


def budget_rate(rho: ScalarField, D: DampingField | ScalarField, lam: float) -> float:
    """Right-hand side ``lambda int rho D`` of the budget identity."""
    dvals = D.values.values if isinstance(D, DampingField) else D.values
    return float(lam * np.sum(rho.values * dvals) * rho.grid.cell_volume)


def default_lambda(C_fit: float) -> float:
    """Heuristic damping multiplier ``2 (C_fit + 1)``."""
    if not math.isfinite(C_fit):
        raise ValueError("C_fit must be finite")
    return 2.0 * (C_fit + 1.0)
