"""Backend selection for the pair-sum kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. Setting ``BRINKMAN_LAB_PURE=1`` forces the fallback.
``BRINKMAN_LAB_THREADS`` sets the default thread count of the compiled
kernels.
"""
from __future__ import annotations

import os

from . import _fallback

_FORCE_PURE = os.environ.get("BRINKMAN_LAB_PURE", "").strip() not in ("", "0")

try:
    if _FORCE_PURE:
        raise ImportError("pure backend requested")
    from . import _kernels as _impl  # type: ignore[attr-defined]

    BACKEND = "compiled"
except ImportError:
    _impl = _fallback
    BACKEND = "python"


def _env_threads() -> int:
    raw = os.environ.get("BRINKMAN_LAB_THREADS", "").strip()
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        return 1


_threads = _env_threads()


def set_threads(n: int) -> None:
    """Thread count used by the compiled kernels (ignored by the fallback)."""
    global _threads
    if n < 1:
        raise ValueError("thread count must be positive")
    _threads = int(n)


def get_threads() -> int:
    return _threads


def lag_sums(rho, w, p: float, weighted: bool, impl=None):
    """Per-lag pair sums for 1-d or 2-d arrays (see ``_kernels``)."""
    mod = _impl if impl is None else impl
    fn = mod.lag_sums_1d if rho.ndim == 1 else mod.lag_sums_2d
    return fn(rho, w, float(p), bool(weighted), _threads)


def pair_terms(rho_x, rho_y, w_x, w_y, p: float, weighted: bool):
    return _impl.pair_terms(rho_x, rho_y, w_x, w_y, float(p), bool(weighted))
