"""Barotropic pressure laws, internal energy and truncation.

A law is a map ``P: [0, inf) -> R`` with ``P(0) = 0`` together with an
exponent ``gamma > 1``. The admissible class is

    C^-1 rho^gamma - C <= P(rho) <= C rho^gamma + C,
    |P'(s)| <= Pbar s^(gamma - 1),

and :func:`validate_law` fits the smallest ``(C, Pbar)`` on a sample scan.
Non-monotone built-ins oscillate multiplicatively in ``log(1 + rho)`` so
that the derivative bound holds down to ``rho = 0``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import integrate, optimize
from scipy.interpolate import CubicHermiteSpline

__all__ = [
    "PressureLaw",
    "TruncatedLaw",
    "ValidationReport",
    "builtin_law",
    "law_from_table",
    "load_law",
    "internal_energy",
    "truncate",
    "validate_law",
    "EnergyTable",
    "BUILTIN_LAWS",
]


@dataclass(frozen=True)
class PressureLaw:
    """An immutable pressure law.

    ``evaluate`` and ``derivative`` must accept numpy arrays. When
    ``derivative`` is None a central difference is used. ``energy``, if
    given, is a closed-form ``e(rho; rho_ref)``.
    """

    gamma: float
    evaluate: Callable = field(repr=False)
    derivative: Optional[Callable] = field(default=None, repr=False)
    label: str = "custom"
    params: dict = field(default_factory=dict)
    fitted_constants: Optional[tuple] = None
    energy: Optional[Callable] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.gamma > 1:
            raise ValueError(f"gamma must exceed 1, got {self.gamma}")

    def __call__(self, rho):
        return self.evaluate(np.asarray(rho, dtype=float))

    def dP(self, rho):
        rho = np.asarray(rho, dtype=float)
        if self.derivative is not None:
            return self.derivative(rho)
        step = 1e-6 * np.maximum(rho, 1e-6)
        lo = np.maximum(rho - step, 0.0)
        return (self.evaluate(rho + step) - self.evaluate(lo)) / (rho + step - lo)


@dataclass(frozen=True)
class TruncatedLaw(PressureLaw):
    """``P`` below ``c0``; ``P(c0) + cmatch (rho - c0)^beta`` above it."""

    base: Optional[PressureLaw] = field(default=None, repr=False)
    c0: float = 1.0
    beta: float = 4.0
    cmatch: float = 1.0


@dataclass(frozen=True)
class ValidationReport:
    C_fit: float
    Pbar_fit: float
    passed: bool
    rho_max: float
    samples: int

    def to_dict(self) -> dict:
        return {
            "C_fit": self.C_fit,
            "Pbar_fit": self.Pbar_fit,
            "pass": self.passed,
            "rho_max": self.rho_max,
            "samples": self.samples,
        }


# --- built-in families ---------------------------------------------------------

def _gamma_law(gamma: float) -> dict:
    g = gamma

    def energy(rho, rho_ref):
        rho = np.asarray(rho, dtype=float)
        return (rho ** (g - 1) - rho_ref ** (g - 1)) / (g - 1)

    return dict(
        evaluate=lambda r: r**g,
        derivative=lambda r: g * r ** (g - 1),
        energy=energy,
    )


def _nonmonotone_wave(gamma: float, eps: float = 0.5, omega: float = 8.0) -> dict:
    if not abs(eps) < 1:
        raise ValueError(f"nonmonotone_wave needs |eps| < 1, got {eps}")
    g = gamma

    def evaluate(r):
        return r**g * (1.0 + eps * np.cos(omega * np.log1p(r)))

    def derivative(r):
        phase = omega * np.log1p(r)
        return r ** (g - 1) * (
            g * (1.0 + eps * np.cos(phase)) - eps * omega * r / (1.0 + r) * np.sin(phase)
        )

    return dict(evaluate=evaluate, derivative=derivative, params=dict(eps=eps, omega=omega))


def _two_well(gamma: float, depth: float = 0.8, rho1: float = 1.0, rho2: float = 3.0) -> dict:
    if not 0 <= depth < 1:
        raise ValueError(f"two_well needs 0 <= depth < 1, got {depth}")
    if not 0 < rho1 < rho2:
        raise ValueError("two_well needs 0 < rho1 < rho2")
    g = gamma
    half = 0.5 * (rho2 - rho1)

    def bump(r):
        q = np.where((r > rho1) & (r < rho2), (r - rho1) * (rho2 - r) / half**2, 0.0)
        return q * q

    def dbump(r):
        inside = (r > rho1) & (r < rho2)
        q = np.where(inside, (r - rho1) * (rho2 - r) / half**2, 0.0)
        dq = np.where(inside, (rho1 + rho2 - 2.0 * r) / half**2, 0.0)
        return 2.0 * q * dq

    def evaluate(r):
        return r**g * (1.0 - depth * bump(r))

    def derivative(r):
        return g * r ** (g - 1) * (1.0 - depth * bump(r)) - depth * r**g * dbump(r)

    return dict(
        evaluate=evaluate,
        derivative=derivative,
        params=dict(depth=depth, rho1=rho1, rho2=rho2),
    )


BUILTIN_LAWS = {
    "gamma_law": _gamma_law,
    "nonmonotone_wave": _nonmonotone_wave,
    "two_well": _two_well,
}


def builtin_law(name: str, gamma: float = 2.0, validate: bool = True, **params) -> PressureLaw:
    """Construct a named law.

    Parameters
    ----------
    name : {"gamma_law", "nonmonotone_wave", "two_well"}
    gamma : float
        Growth exponent, must exceed 1.
    validate : bool
        Fit ``(C, Pbar)`` on ``(0, 10]`` and store them on the law. A failing
        fit only warns; the CLI treats it as an error.
    **params
        Family parameters: ``eps, omega`` for the wave law, ``depth, rho1,
        rho2`` for the two-well law.
    """
    if name not in BUILTIN_LAWS:
        raise ValueError(f"unknown law {name!r}; choose from {sorted(BUILTIN_LAWS)}")
    if not gamma > 1:
        raise ValueError(f"gamma must exceed 1, got {gamma}")
    parts = BUILTIN_LAWS[name](gamma, **params)
    law_params = dict(parts.pop("params", {}))
    law = PressureLaw(gamma=gamma, label=name, params=law_params, **parts)
    if validate:
        report = validate_law(law, rho_max=10.0, samples=2000)
        if not report.passed:
            warnings.warn(f"law {name} fails the growth/derivative hypotheses: {report}")
        law = replace(law, fitted_constants=(report.C_fit, report.Pbar_fit))
    return law


def law_from_table(spec: dict) -> PressureLaw:
    """Piecewise-polynomial law from a JSON-style table.

    Schema::

        {"name": str, "gamma": float,
         "breakpoints": [b0 = 0, b1, ..., bm],
         "coefficients": [[c_0, c_1, ...], ...]}   # m rows

    On ``[b_i, b_{i+1})`` the law is ``sum_j c_j (rho - b_i)^j``; the last
    polynomial extends past ``b_m``.
    """
    try:
        gamma = float(spec["gamma"])
        bps = np.asarray(spec["breakpoints"], dtype=float)
        coefs = [np.asarray(c, dtype=float) for c in spec["coefficients"]]
    except KeyError as exc:
        raise ValueError(f"pressure table is missing key {exc.args[0]!r}") from None
    if len(coefs) != len(bps) - 1 or len(bps) < 2:
        raise ValueError("need len(coefficients) == len(breakpoints) - 1 >= 1")
    if bps[0] != 0 or np.any(np.diff(bps) <= 0):
        raise ValueError("breakpoints must start at 0 and increase strictly")
    polys = [np.polynomial.Polynomial(c) for c in coefs]
    dpolys = [p.deriv() for p in polys]

    def piece(r):
        return np.clip(np.searchsorted(bps, r, side="right") - 1, 0, len(polys) - 1)

    def _apply(r, table):
        r = np.asarray(r, dtype=float)
        idx = piece(r)
        out = np.empty_like(r)
        for i, p in enumerate(table):
            sel = idx == i
            out[sel] = p(r[sel] - bps[i])
        return out

    return PressureLaw(
        gamma=gamma,
        evaluate=lambda r: _apply(r, polys),
        derivative=lambda r: _apply(r, dpolys),
        label=spec.get("name", "table"),
        params={"breakpoints": bps.tolist(), "coefficients": [c.tolist() for c in coefs]},
    )


def load_law(spec: dict) -> PressureLaw:
    """Build a law from a config table: ``{"name": ..., "gamma": ..., ...}``.

    A ``table`` entry (inline dict or path to a JSON file) selects
    :func:`law_from_table`; a ``truncate = {c0, beta}`` entry wraps the
    result with :func:`truncate`.
    """
    spec = dict(spec)
    trunc = spec.pop("truncate", None)
    if "table" in spec:
        table = spec["table"]
        if isinstance(table, str):
            with open(table) as fh:
                table = json.load(fh)
        law = law_from_table(table)
    else:
        name = spec.pop("name", "gamma_law")
        gamma = float(spec.pop("gamma", 2.0))
        law = builtin_law(name, gamma=gamma, **spec)
    if trunc is not None:
        law = truncate(law, float(trunc["c0"]), float(trunc.get("beta", 4.0)))
    return law


# --- internal energy -----------------------------------------------------------

def _kinks(law: PressureLaw) -> list:
    """Densities where a built-in or tabulated law is only piecewise smooth."""
    out = [float(v) for key in ("rho1", "rho2", "c0") if (v := law.params.get(key))]
    out += [float(b) for b in law.params.get("breakpoints", [])[1:]]
    return sorted(out)


def _energy_scalar(law: PressureLaw, rho: float, rho_ref: float) -> float:
    if rho == rho_ref:
        return 0.0

    def integrand(s):
        return float(law(s)) / (s * s)

    lo, hi = sorted((rho, rho_ref))
    inner = [k for k in _kinks(law) if lo < k < hi] or None
    val, err = integrate.quad(integrand, lo, hi, epsabs=0.0, epsrel=1e-10, limit=400,
                              points=inner)
    if not math.isfinite(val) or (err > 1e-6 * max(abs(val), 1.0)):
        raise ArithmeticError(f"internal energy quadrature did not converge at rho={rho}")
    return val if rho > rho_ref else -val


def internal_energy(law: PressureLaw, rho, rho_ref: float = 1.0):
    """``e(rho) = int_{rho_ref}^{rho} P(s)/s^2 ds`` by adaptive Gauss-Kronrod.

    Accepts scalars or arrays; ``e(rho_ref) = 0`` exactly.
    """
    if not rho_ref > 0:
        raise ValueError("rho_ref must be positive")
    arr = np.asarray(rho, dtype=float)
    if np.any(arr < 0):
        raise ValueError("rho must be non-negative")
    if arr.ndim == 0:
        return _energy_scalar(law, float(arr), rho_ref)
    return np.vectorize(lambda r: _energy_scalar(law, r, rho_ref))(arr)


class EnergyTable:
    """Fast vectorised ``e(rho)`` for laws without a closed form.

    Values at geometric nodes come from chained Gauss-Legendre panels and are
    interpolated with cubic Hermite splines using the exact slope
    ``P(s)/s^2``. The table grows on demand when a density exceeds its
    range.
    """

    def __init__(self, law: PressureLaw, rho_ref: float = 1.0, rho_hi: float = 16.0,
                 rho_lo: float = 1e-8, per_decade: int = 2048):
        self.law = law
        self.rho_ref = float(rho_ref)
        self.rho_lo = rho_lo
        self.per_decade = per_decade
        self._build(max(rho_hi, 4.0 * rho_ref))

    def _build(self, rho_hi: float):
        decades = math.log10(rho_hi / self.rho_lo)
        nodes = np.geomspace(self.rho_lo, rho_hi, int(decades * self.per_decade) + 1)
        extra = [k for k in _kinks(self.law) if self.rho_lo < k < rho_hi]
        nodes = np.union1d(nodes, [self.rho_ref, *extra])
        iref = int(np.searchsorted(nodes, self.rho_ref))

        # 8-point Gauss-Legendre per interval; kinks are nodes, so each
        # interval is smooth
        t, wts = np.polynomial.legendre.leggauss(8)
        a, b = nodes[:-1, None], nodes[1:, None]
        s = 0.5 * (b - a) * t[None, :] + 0.5 * (b + a)
        steps = 0.5 * (b[:, 0] - a[:, 0]) * np.sum(wts * self.law(s) / s**2, axis=1)
        cum = np.concatenate([[0.0], np.cumsum(steps)])
        values = cum - cum[iref]
        slopes = self.law(nodes) / nodes**2
        self.rho_hi = rho_hi
        self._spline = CubicHermiteSpline(nodes, values, slopes, extrapolate=False)
        self._e_lo = values[0]

    def __call__(self, rho) -> np.ndarray:
        rho = np.asarray(rho, dtype=float)
        top = float(rho.max()) if rho.size else 0.0
        if top > self.rho_hi:
            self._build(2.0 ** math.ceil(math.log2(top)) * 2.0)
        out = self._spline(np.clip(rho, self.rho_lo, None))
        return np.where(rho < self.rho_lo, self._e_lo, out)


def energy_evaluator(law: PressureLaw, rho_ref: float = 1.0) -> Callable:
    """Vectorised ``rho -> e(rho)``: closed form when the law has one."""
    if law.energy is not None:
        return lambda rho: law.energy(rho, rho_ref)
    return EnergyTable(law, rho_ref)


# --- truncation ----------------------------------------------------------------

def truncate(law: PressureLaw, c0: float, beta: float = 4.0) -> TruncatedLaw:
    """Return ``P_eps``: ``P`` on ``[0, c0]``, ``P(c0) + C (rho - c0)^beta`` beyond.

    ``C = max(1, P'(c0^-)/beta)`` so the upper branch eventually dominates.
    """
    if not c0 > 0:
        raise ValueError("c0 must be positive")
    if not beta > 1:
        raise ValueError("beta must exceed 1")
    p_c0 = float(law(c0))
    dp_c0 = float(law.dP(c0))
    if not (math.isfinite(p_c0) and math.isfinite(dp_c0)):
        raise ValueError(f"law is undefined at c0={c0}")
    cmatch = max(1.0, dp_c0 / beta)

    def evaluate(r):
        r = np.asarray(r, dtype=float)
        upper = p_c0 + cmatch * np.clip(r - c0, 0.0, None) ** beta
        return np.where(r <= c0, law(np.minimum(r, c0)), upper)

    def derivative(r):
        r = np.asarray(r, dtype=float)
        upper = cmatch * beta * np.clip(r - c0, 0.0, None) ** (beta - 1)
        return np.where(r <= c0, law.dP(np.minimum(r, c0)), upper)

    return TruncatedLaw(
        gamma=law.gamma,
        evaluate=evaluate,
        derivative=derivative,
        label=f"{law.label}|truncated",
        params=dict(law.params, c0=c0, beta=beta),
        fitted_constants=None,
        base=law,
        c0=c0,
        beta=beta,
        cmatch=cmatch,
    )


# --- validation ----------------------------------------------------------------

def _refined_max(func: Callable, rho: np.ndarray) -> float:
    """Maximum of ``func`` on the scan, polished by a bounded search between
    the neighbours of the best sample."""
    vals = func(rho)
    i = int(np.argmax(vals))
    lo, hi = rho[max(i - 1, 0)], rho[min(i + 1, rho.size - 1)]
    best = float(vals[i])
    if hi > lo:
        res = optimize.minimize_scalar(lambda r: -float(func(np.asarray(r))), bounds=(lo, hi),
                                       method="bounded", options={"xatol": 1e-12 * hi})
        best = max(best, -float(res.fun))
    return best


def validate_law(law: PressureLaw, rho_max: float = 10.0, samples: int = 2000,
                 gamma: Optional[float] = None) -> ValidationReport:
    """Fit the smallest constants of the growth and derivative hypotheses.

    The scan mixes ``samples // 2`` geometric points on
    ``[1e-12 rho_max, rho_max]`` with as many uniform points. For each
    sample the growth bound requires ``C >= P/(rho^g + 1)`` and
    ``C >= (sqrt(P^2 + 4 rho^g) - P)/2``; ``C`` is floored at 1, since a
    two-sided bound with ``C < 1`` cannot hold for large densities.

    ``Pbar`` is declared infinite when ``|P'|/rho^(g-1)`` still grows as
    ``rho -> 0``: its maximum over the lowest decade of the scan exceeds
    twice the maximum over the next decade.
    """
    if not rho_max > 0:
        raise ValueError("rho_max must be positive")
    if samples < 100:
        raise ValueError("need at least 100 samples")
    g = law.gamma if gamma is None else gamma
    geo = np.geomspace(1e-12 * rho_max, rho_max, samples // 2)
    lin = np.linspace(rho_max / samples, rho_max, samples - samples // 2)
    rho = np.union1d(geo, lin)
    P = law(rho)
    dP = law.dP(rho)
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(dP))):
        raise ValueError("pressure law produced non-finite values in the scan")

    def c_upper(r):
        return law(r) / (r**g + 1.0)

    def c_lower(r):
        p = law(r)
        return 0.5 * (np.sqrt(p * p + 4.0 * r**g) - p)

    def dratio(r):
        return np.abs(law.dP(r)) / r ** (g - 1)

    C_fit = float(max(1.0, _refined_max(c_upper, rho), _refined_max(c_lower, rho)))

    ratio = np.abs(dP) / rho ** (g - 1)
    lowest = ratio[rho <= 10 * geo[0]].max()
    second = ratio[(rho > 10 * geo[0]) & (rho <= 100 * geo[0])].max()
    if lowest > 2.0 * second and lowest > 0:
        Pbar_fit = math.inf
    else:
        Pbar_fit = float(_refined_max(dratio, rho))
    passed = math.isfinite(C_fit) and math.isfinite(Pbar_fit)
    return ValidationReport(C_fit, Pbar_fit, passed, float(rho_max), int(rho.size))
