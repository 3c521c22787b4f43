"""Periodic grids and fields on the unit torus, with spectral operators.

All fields are sampled at the nodes ``x_j = j / n`` of the unit torus
``T^d`` (``d`` in {1, 2}). Spectral work uses wavenumbers ``2*pi*xi`` with
integer ``xi``; fields live in physical space and the Fourier transform is
taken per operation.

Odd derivatives annihilate the Nyquist mode (its derivative vanishes at the
grid nodes), while the Laplacian keeps it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Union

import numpy as np

__all__ = [
    "PeriodicGrid",
    "ScalarField",
    "VectorField",
    "gradient",
    "divergence",
    "laplacian",
    "spectral_derivatives",
    "helmholtz_solve",
    "neg_inv_laplacian_div",
    "norms",
    "dealiased_product",
    "write_snapshot",
    "read_snapshot",
]


@dataclass(frozen=True)
class PeriodicGrid:
    """Uniform grid on the unit torus.

    Parameters
    ----------
    dim : int
        Spatial dimension, 1 or 2.
    n : int
        Points per dimension; a power of two, at least 8.
    """

    dim: int
    n: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.n < 8 or self.n & (self.n - 1):
            raise ValueError(f"n must be a power of two >= 8, got {self.n}")

    @property
    def spacing(self) -> float:
        return 1.0 / self.n

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    def coords(self) -> tuple:
        """Node coordinates, one array per axis, broadcast to ``shape``."""
        x = np.arange(self.n) * self.spacing
        if self.dim == 1:
            return (x,)
        return tuple(np.meshgrid(x, x, indexing="ij"))

    @cached_property
    def wavenumbers(self) -> tuple:
        """Angular wavenumbers ``2*pi*xi`` per axis, broadcastable."""
        k = 2.0 * np.pi * np.fft.fftfreq(self.n, d=1.0 / self.n)
        if self.dim == 1:
            return (k,)
        return (k[:, None], k[None, :])

    @cached_property
    def odd_wavenumbers(self) -> tuple:
        """Wavenumbers with the Nyquist entry zeroed, for odd derivatives."""
        k = 2.0 * np.pi * np.fft.fftfreq(self.n, d=1.0 / self.n)
        k[self.n // 2] = 0.0
        if self.dim == 1:
            return (k,)
        return (k[:, None], k[None, :])

    @cached_property
    def k2(self) -> np.ndarray:
        """``|2*pi*xi|^2`` on the full transform grid."""
        out = np.zeros(self.shape)
        for k in self.wavenumbers:
            out = out + k**2
        return out

    def displacement(self) -> np.ndarray:
        """Minimum-image distance of each node from the origin."""
        x = np.arange(self.n) * self.spacing
        x = np.minimum(x, 1.0 - x)
        if self.dim == 1:
            return x
        return np.sqrt(x[:, None] ** 2 + x[None, :] ** 2)


def _finite(values: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} contains non-finite values")
    return values


class ScalarField:
    """Real samples of a scalar function on a :class:`PeriodicGrid`.

    The sample array is copied and frozen on construction.
    """

    __slots__ = ("grid", "values")

    def __init__(self, grid: PeriodicGrid, values):
        arr = np.array(values, dtype=float)
        if arr.shape != grid.shape:
            arr = arr.reshape(grid.shape)
        _finite(arr, "ScalarField")
        arr.setflags(write=False)
        self.grid = grid
        self.values = arr

    @classmethod
    def from_function(cls, grid: PeriodicGrid, func) -> "ScalarField":
        return cls(grid, func(*grid.coords()))

    @classmethod
    def constant(cls, grid: PeriodicGrid, c: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(c)))

    def mean(self) -> float:
        return float(self.values.mean())

    def integral(self) -> float:
        # unit-volume torus: integral == mean
        return float(self.values.mean())

    def _coerce(self, other):
        if isinstance(other, ScalarField):
            if other.grid != self.grid:
                raise ValueError("fields live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return ScalarField(self.grid, self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return ScalarField(self.grid, self.values - self._coerce(other))

    def __mul__(self, other):
        return ScalarField(self.grid, self.values * self._coerce(other))

    __rmul__ = __mul__

    def __neg__(self):
        return ScalarField(self.grid, -self.values)

    def __repr__(self):
        return f"ScalarField(dim={self.grid.dim}, n={self.grid.n})"


class VectorField:
    """A ``dim``-component vector field; ``values`` has shape ``(dim, *grid.shape)``."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: PeriodicGrid, values):
        arr = np.array(values, dtype=float)
        want = (grid.dim,) + grid.shape
        if arr.shape != want:
            arr = arr.reshape(want)
        _finite(arr, "VectorField")
        arr.setflags(write=False)
        self.grid = grid
        self.values = arr

    @classmethod
    def zeros(cls, grid: PeriodicGrid) -> "VectorField":
        return cls(grid, np.zeros((grid.dim,) + grid.shape))

    @classmethod
    def from_components(cls, components) -> "VectorField":
        components = list(components)
        grid = components[0].grid
        if any(c.grid != grid for c in components):
            raise ValueError("all components must share one grid")
        if len(components) != grid.dim:
            raise ValueError(f"need {grid.dim} components, got {len(components)}")
        return cls(grid, np.stack([c.values for c in components]))

    @property
    def components(self) -> tuple:
        return tuple(ScalarField(self.grid, c) for c in self.values)

    def magnitude(self) -> ScalarField:
        return ScalarField(self.grid, np.sqrt(np.sum(self.values**2, axis=0)))

    def _coerce(self, other):
        if isinstance(other, VectorField):
            if other.grid != self.grid:
                raise ValueError("fields live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return VectorField(self.grid, self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return VectorField(self.grid, self.values - self._coerce(other))

    def __mul__(self, other):
        return VectorField(self.grid, self.values * self._coerce(other))

    __rmul__ = __mul__

    def __neg__(self):
        return VectorField(self.grid, -self.values)

    def __repr__(self):
        return f"VectorField(dim={self.grid.dim}, n={self.grid.n})"


Field = Union[ScalarField, VectorField]


# --- array-level kernels (used by the solver's inner loop) -------------------


def _grad_array(f: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    fh = np.fft.fftn(f)
    return np.stack([np.fft.ifftn(1j * k * fh).real for k in grid.odd_wavenumbers])


def _div_array(u: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    acc = np.zeros(grid.shape, dtype=complex)
    for comp, k in zip(u, grid.odd_wavenumbers):
        acc += 1j * k * np.fft.fftn(comp)
    return np.fft.ifftn(acc).real


def _lap_array(f: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    return np.fft.ifftn(-grid.k2 * np.fft.fftn(f)).real


def _helmholtz_array(f: np.ndarray, grid: PeriodicGrid, mu: float, alpha: float) -> np.ndarray:
    symbol = 1.0 / (mu * grid.k2 + alpha)
    return np.stack([np.fft.ifftn(symbol * np.fft.fftn(c)).real for c in f])


def _inv_lap_div_array(R: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    acc = np.zeros(grid.shape, dtype=complex)
    for comp, k in zip(R, grid.odd_wavenumbers):
        acc += 1j * k * np.fft.fftn(comp)
    k2 = grid.k2.copy()
    k2.flat[0] = 1.0
    gh = -acc / k2
    gh.flat[0] = 0.0
    return np.fft.ifftn(gh).real


def _jacobian_norm_array(u: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    """Pointwise Frobenius norm of the velocity gradient."""
    total = np.zeros(grid.shape)
    for comp in u:
        total += np.sum(_grad_array(comp, grid) ** 2, axis=0)
    return np.sqrt(total)


# --- field-level operations ---------------------------------------------------

def gradient(f: ScalarField) -> VectorField:
    if not isinstance(f, ScalarField):
        raise TypeError("gradient needs a ScalarField")
    return VectorField(f.grid, _grad_array(f.values, f.grid))


def divergence(u: VectorField) -> ScalarField:
    if not isinstance(u, VectorField):
        raise TypeError("divergence needs a VectorField")
    return ScalarField(u.grid, _div_array(u.values, u.grid))


def laplacian(f: Field) -> Field:
    if isinstance(f, ScalarField):
        return ScalarField(f.grid, _lap_array(f.values, f.grid))
    return VectorField(f.grid, np.stack([_lap_array(c, f.grid) for c in f.values]))


def spectral_derivatives(f: Field, op: str) -> Field:
    """Apply ``op`` in {"grad", "div", "lap"} spectrally.

    Raises
    ------
    TypeError
        If the operator does not fit the rank of ``f`` (gradient of a
        vector, divergence of a scalar).
    ValueError
        For an unknown operator name.
    """
    if op == "grad":
        return gradient(f)
    if op == "div":
        return divergence(f)
    if op == "lap":
        return laplacian(f)
    raise ValueError(f"unknown operator {op!r}")


def helmholtz_solve(f: VectorField, mu: float, alpha: float) -> VectorField:
    """Solve ``(-mu*Lap + alpha) v = f`` with the Fourier symbol ``1/(mu|k|^2 + alpha)``."""
    if not mu > 0 or not alpha > 0:
        raise ValueError(f"mu and alpha must be positive, got mu={mu}, alpha={alpha}")
    return VectorField(f.grid, _helmholtz_array(f.values, f.grid, mu, alpha))


def neg_inv_laplacian_div(R: VectorField) -> ScalarField:
    """Zero-mean ``g`` with ``Lap g = div R``."""
    return ScalarField(R.grid, _inv_lap_div_array(R.values, R.grid))


def norms(f: Field, kind: str = "L2", p: float = 2.0) -> float:
    """Discrete norm on the unit torus.

    ``kind`` is ``"Lp"`` (with exponent ``p``), ``"L2"``, ``"Linf"`` or
    ``"H1"``. Vector fields use the pointwise Euclidean magnitude; the H1
    seminorm sums all first derivatives of all components.
    """
    if kind == "L2":
        kind, p = "Lp", 2.0
    if isinstance(f, VectorField):
        mag = np.sqrt(np.sum(f.values**2, axis=0))
        comps = f.values
    else:
        mag = np.abs(f.values)
        comps = f.values[None]
    if kind == "Lp":
        if p < 1:
            raise ValueError(f"p must be >= 1, got {p}")
        return float(np.mean(mag**p) ** (1.0 / p))
    if kind == "Linf":
        return float(mag.max())
    if kind == "H1":
        grad_sq = sum(np.sum(_grad_array(c, f.grid) ** 2, axis=0) for c in comps)
        return float(np.sqrt(np.mean(mag**2) + np.mean(grad_sq)))
    raise ValueError(f"unknown norm kind {kind!r}")


def dealiased_product(a: ScalarField, b: ScalarField) -> ScalarField:
    """Pointwise product with the 2/3 rule: both factors are truncated to
    ``|xi| < n/3`` before multiplying, so the product has no aliased modes
    below ``n/3``."""
    grid = a.grid
    xi = np.abs(np.fft.fftfreq(grid.n, d=1.0 / grid.n))
    keep = xi < grid.n / 3.0
    mask = keep if grid.dim == 1 else keep[:, None] & keep[None, :]
    fa = np.fft.ifftn(np.fft.fftn(a.values) * mask).real
    fb = np.fft.ifftn(np.fft.fftn(b.values) * mask).real
    prod = np.fft.ifftn(np.fft.fftn(fa * fb) * mask).real
    return ScalarField(grid, prod)


# --- snapshot files ----------------------------------------------------------

def write_snapshot(path, field: Field, name: str, time: float) -> None:
    """Write a one-line JSON header then little-endian float64 samples.

    Vector fields are written component-major; the component count is
    recovered from the payload length on read.
    """
    header = {"dim": field.grid.dim, "n": field.grid.n, "name": name, "time": float(time)}
    payload = np.ascontiguousarray(field.values, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def read_snapshot(path) -> tuple:
    """Return ``(header, field)`` from a snapshot file."""
    raw = Path(path).read_bytes()
    head, _, body = raw.partition(b"\n")
    header = json.loads(head)
    grid = PeriodicGrid(int(header["dim"]), int(header["n"]))
    data = np.frombuffer(body, dtype="<f8")
    per = grid.n**grid.dim
    if data.size == per:
        return header, ScalarField(grid, data.reshape(grid.shape))
    if data.size == per * grid.dim:
        return header, VectorField(grid, data.reshape((grid.dim,) + grid.shape))
    raise ValueError(f"{path}: payload of {data.size} values does not match grid n={grid.n}")
