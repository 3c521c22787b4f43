"""TOML run configuration: schema checks and construction of solver objects.

Every error raised here is a :class:`ConfigError` whose message starts with
the dotted key at fault (for example ``physics.mu``).
"""
from __future__ import annotations

import hashlib
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .fields import PeriodicGrid, ScalarField
from .harmonic import KernelSpec, random_bandlimited
from .pressure import PressureLaw, load_law
from .solver import SimConfig, Source

__all__ = ["ConfigError", "RunSpec", "load_config", "parse_config", "build_rho0", "config_hash"]


class ConfigError(ValueError):
    """Schema violation; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


_SCHEMA = {
    "grid": {"dim", "n"},
    "physics": {"mu", "alpha", "alpha_k", "rho_ref", "rho0", "source"},
    "pressure": {"law", "gamma", "params", "table", "truncate", "rho_max", "samples"},
    "time": {"dt", "t_end", "scheme", "rho_cap"},
    "weights": {"lambda", "interpolation"},
    "kernels": {"a", "h0", "m"},
    "output": {"dir", "every", "emit_every"},
    "diagnostics": {"theta", "lp", "commutator_pairs", "sampler", "samples", "seed"},
    "lemmas": {"ensemble", "seeds", "kmax", "decay", "pairs", "resolutions",
               "square_resolutions", "square_h0", "dim"},
    "study": {"resolutions", "scenario"},
}
_REQUIRED = [("grid", "n"), ("physics", "mu"), ("physics", "alpha"), ("time", "dt"), ("time", "t_end")]


def _num(tbl: dict, section: str, key: str, default=None, positive=False, nonneg=False,
         required=False) -> Optional[float]:
    if key not in tbl:
        if required:
            raise ConfigError(f"{section}.{key}", "missing required key")
        return default
    v = tbl[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{section}.{key}", f"expected a finite number, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(f"{section}.{key}", f"must be positive, got {v}")
    if nonneg and v < 0:
        raise ConfigError(f"{section}.{key}", f"must be non-negative, got {v}")
    return float(v)


def _int(tbl: dict, section: str, key: str, default=None, minimum=None) -> Optional[int]:
    if key not in tbl:
        return default
    v = tbl[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{section}.{key}", f"expected an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{section}.{key}", f"must be >= {minimum}, got {v}")
    return int(v)


def _num_list(tbl: dict, section: str, key: str, default=None) -> Optional[list]:
    if key not in tbl:
        return default
    v = tbl[key]
    if not isinstance(v, list) or not v or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise ConfigError(f"{section}.{key}", f"expected a non-empty list of numbers, got {v!r}")
    return [float(x) for x in v]


@dataclass
class RunSpec:
    """Parsed configuration: the solver config plus output and diagnostics settings."""

    raw: dict
    sim: Optional[SimConfig]
    law_spec: dict
    out_dir: Optional[str] = None
    snapshot_every: int = 0
    theta: float = 1.0
    lp: tuple = (1.0, 2.0, 4.0)
    commutator_pairs: int = 2000
    sampler_mode: str = "auto"
    sampler_samples: int = 200_000
    h0_list: tuple = ()
    kernel_a: Optional[float] = None
    kernel_m: int = 32
    lemmas: dict = field(default_factory=dict)
    study: dict = field(default_factory=dict)
    seed: int = 0


def config_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def build_rho0(spec: Any, grid: PeriodicGrid, seed: int = 0) -> ScalarField:
    """Initial density from ``physics.rho0``.

    Kinds: ``constant`` (``value``), ``bump`` (``base, amplitude, center,
    width``), ``sine`` (``base, amplitude, k``), ``indicator`` (``lo, hi,
    inside, outside``; 1-d intervals, applied along x in 2-d) and ``random``
    (``base, amplitude, kmax, decay``; uses the run seed).
    """
    key = "physics.rho0"
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        spec = {"kind": "constant", "value": float(spec)}
    if not isinstance(spec, dict):
        raise ConfigError(key, "expected a number or a table")
    spec = dict(spec)
    kind = spec.pop("kind", "constant")

    def get(name, default):
        v = spec.pop(name, default)
        if isinstance(v, list):
            return [float(x) for x in v]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{key}.{name}", f"expected a number, got {v!r}")
        return float(v)

    coords = grid.coords()
    if kind == "constant":
        vals = np.full(grid.shape, get("value", 1.0))
    elif kind == "bump":
        base, amp, width = get("base", 1.0), get("amplitude", 0.5), get("width", 0.05)
        center = get("center", 0.5)
        center = center if isinstance(center, list) else [center] * grid.dim
        if len(center) != grid.dim:
            raise ConfigError(f"{key}.center", f"needs {grid.dim} entries")
        r2 = 0.0
        for x, c in zip(coords, center):
            d = np.abs(x - c)
            d = np.minimum(d, 1.0 - d)
            r2 = r2 + d * d
        vals = base + amp * np.exp(-r2 / (2.0 * width**2))
    elif kind == "sine":
        base, amp, k = get("base", 1.0), get("amplitude", 0.1), get("k", 1.0)
        vals = base + amp * np.sin(2.0 * np.pi * k * coords[0])
    elif kind == "indicator":
        lo, hi = get("lo", 0.0), get("hi", 0.5)
        inside, outside = get("inside", 2.0), get("outside", 1.0)
        vals = np.where((coords[0] >= lo) & (coords[0] < hi), inside, outside)
    elif kind == "random":
        base, amp = get("base", 1.0), get("amplitude", 0.2)
        kmax = int(get("kmax", 4.0))
        field_ = random_bandlimited(grid, seed, kmax=kmax, decay=get("decay", 1.5))
        v = field_.values
        scale = float(np.abs(v).max()) or 1.0
        vals = base + amp * v / scale
    else:
        raise ConfigError(f"{key}.kind", f"unknown kind {kind!r}")
    if spec:
        raise ConfigError(f"{key}.{sorted(spec)[0]}", "unknown key")
    vals = np.asarray(vals, dtype=float) * np.ones(grid.shape)
    if np.any(vals < 0):
        raise ConfigError(key, "initial density must be non-negative")
    if not vals.mean() > 0:
        raise ConfigError(key, "initial density must have positive mass")
    return ScalarField(grid, vals)


def _law_spec(p: dict) -> dict:
    spec: dict = {}
    if "table" in p:
        spec["table"] = p["table"]
    else:
        name = p.get("law", "gamma_law")
        if not isinstance(name, str):
            raise ConfigError("pressure.law", "expected a string")
        spec["name"] = name
        spec["gamma"] = _num(p, "pressure", "gamma", 2.0)
        params = p.get("params", {})
        if not isinstance(params, dict):
            raise ConfigError("pressure.params", "expected a table")
        spec.update(params)
    if "truncate" in p:
        t = p["truncate"]
        if not isinstance(t, dict) or "c0" not in t:
            raise ConfigError("pressure.truncate", "expected a table with c0 (and optional beta)")
        spec["truncate"] = {"c0": _num(t, "pressure.truncate", "c0", positive=True),
                            "beta": _num(t, "pressure.truncate", "beta", 4.0, positive=True)}
    return spec


def build_law(law_spec: dict) -> PressureLaw:
    import warnings

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return load_law(law_spec)
    except (ValueError, TypeError, OSError) as exc:
        raise ConfigError("pressure", str(exc)) from None


def parse_config(raw: dict, seed: Optional[int] = None, n_override: Optional[int] = None,
                 h0_override: Optional[list] = None, need_sim: bool = True) -> RunSpec:
    """Validate a decoded TOML document and build the run objects."""
    for section, value in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(section, "unknown section")
        if not isinstance(value, dict):
            raise ConfigError(section, "expected a table")
        for key in value:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
    get = lambda s: raw.get(s, {})  # noqa: E731
    if need_sim:
        for section, key in _REQUIRED:
            if key not in get(section):
                raise ConfigError(f"{section}.{key}", "missing required key")

    g = get("grid")
    dim = _int(g, "grid", "dim", 1)
    n = n_override if n_override is not None else _int(g, "grid", "n", 256)
    try:
        grid = PeriodicGrid(dim, n)
    except ValueError as exc:
        raise ConfigError("grid.n" if "n" in str(exc) else "grid.dim", str(exc)) from None

    diag = get("diagnostics")
    run_seed = int(seed) if seed is not None else _int(diag, "diagnostics", "seed", 0) or 0
    law_spec = _law_spec(get("pressure"))

    k = get("kernels")
    h0_list = h0_override if h0_override is not None else _num_list(k, "kernels", "h0", [0.1, 0.01, 0.001])
    for h0 in h0_list:
        if not 0 < h0 < 1:
            raise ConfigError("kernels.h0", f"values must lie in (0, 1), got {h0}")
    a = _num(k, "kernels", "a", None)
    if a is not None and not a > dim:
        raise ConfigError("kernels.a", f"must exceed dim={dim}")
    m = _int(k, "kernels", "m", 32, minimum=16)

    out = get("output")
    out_dir = out.get("dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("output.dir", "expected a string")
    every = _int(out, "output", "every", 0, minimum=0)
    emit = _int(out, "output", "emit_every", 1, minimum=1)

    theta = _num(diag, "diagnostics", "theta", 1.0, positive=True)
    lp = tuple(_num_list(diag, "diagnostics", "lp", [1.0, 2.0, 4.0]))
    if any(p < 1 for p in lp):
        raise ConfigError("diagnostics.lp", "exponents must be >= 1")
    cpairs = _int(diag, "diagnostics", "commutator_pairs", 2000, minimum=0)
    smode = diag.get("sampler", "auto")
    if smode not in ("auto", "full", "montecarlo"):
        raise ConfigError("diagnostics.sampler", f"unknown mode {smode!r}")
    ssamples = _int(diag, "diagnostics", "samples", 200_000, minimum=2)

    spec = RunSpec(raw=raw, sim=None, law_spec=law_spec, out_dir=out_dir, snapshot_every=every,
                   theta=theta, lp=lp, commutator_pairs=cpairs, sampler_mode=smode,
                   sampler_samples=ssamples, h0_list=tuple(h0_list), kernel_a=a, kernel_m=m,
                   lemmas=dict(get("lemmas")), study=dict(get("study")), seed=run_seed)
    if not need_sim:
        return spec

    ph = get("physics")
    mu = _num(ph, "physics", "mu", required=True, positive=True)
    alpha = _num(ph, "physics", "alpha", required=True, positive=True)
    alpha_k = _num(ph, "physics", "alpha_k", 0.0, nonneg=True)
    rho_ref = _num(ph, "physics", "rho_ref", 1.0, positive=True)
    rho0 = build_rho0(ph.get("rho0", 1.0), grid, run_seed)
    src_items = ph.get("source", [])
    if not isinstance(src_items, list):
        raise ConfigError("physics.source", "expected an array of tables")
    try:
        source = Source.from_list(src_items)
        source.evaluate(grid, 0.0)
    except (TypeError, ValueError) as exc:
        raise ConfigError("physics.source", str(exc)) from None

    t = get("time")
    dt = _num(t, "time", "dt", required=True, positive=True)
    t_end = _num(t, "time", "t_end", required=True, positive=True)
    if t_end < dt:
        raise ConfigError("time.t_end", "must be at least time.dt")
    scheme = t.get("scheme", "upwind")
    if scheme not in ("upwind", "muscl"):
        raise ConfigError("time.scheme", f"unknown scheme {scheme!r}")
    rho_cap = _num(t, "time", "rho_cap", 1e8, positive=True)

    wt = get("weights")
    lam = _num(wt, "weights", "lambda", None, nonneg=True)
    interp = wt.get("interpolation", "linear")
    if interp not in ("linear", "spectral"):
        raise ConfigError("weights.interpolation", f"unknown interpolation {interp!r}")

    law = build_law(law_spec)
    a_eff = a if a is not None else dim + 1.0
    kernels = tuple(KernelSpec(a=a_eff, h0=h0, m=m) for h0 in h0_list)
    spec.sim = SimConfig(rho0=rho0, law=law, mu=mu, alpha=alpha, alpha_k=alpha_k, dt=dt,
                         t_end=t_end, source=source, lambda_w=lam, kernels=kernels,
                         rho_ref=rho_ref, scheme=scheme, weight_interpolation=interp,
                         emit_every=emit, rho_cap=rho_cap)
    return spec


def load_config(path, **kwargs) -> tuple:
    """Read and parse a TOML file; returns ``(RunSpec, raw_bytes)``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    try:
        raw = tomllib.loads(data.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError("config", f"invalid TOML: {exc}") from None
    return parse_config(raw, **kwargs), data
