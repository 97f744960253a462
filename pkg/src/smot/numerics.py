"""Root finding, quadrature and distribution-distance helpers."""

from __future__ import annotations

import math
import warnings
from typing import Callable

import numpy as np
from scipy import integrate, optimize, stats
from scipy.optimize.elementwise import find_root

from .errors import ConvergenceError, QuadratureWarning, RootBracketError

XTOL = 1e-10
MAXITER = 200
QUAD_TOL = 1e-9
U_CLAMP = 1e-12


def brent_root(fn: Callable[[float], float], lo: float, hi: float, *, xtol: float = XTOL,
               maxiter: int = MAXITER, what: str = "root") -> float:
    """Bracketed scalar root with sign-change diagnostics."""
    f_lo, f_hi = float(fn(lo)), float(fn(hi))
    if f_lo == 0.0:
        return float(lo)
    if f_hi == 0.0:
        return float(hi)
    if not (np.isfinite(f_lo) and np.isfinite(f_hi)) or f_lo * f_hi > 0:
        raise RootBracketError(f"{what}: no sign change", lo, hi, f_lo, f_hi)
    try:
        return float(optimize.brentq(fn, lo, hi, xtol=xtol, maxiter=maxiter))
    except RuntimeError as exc:  # brentq signals non-convergence this way
        raise ConvergenceError(f"{what}: {exc} on ({lo:.6g}, {hi:.6g})") from exc


def bracket_roots(fn: Callable[..., np.ndarray], lo, hi, *, args: tuple = (), xtol: float = XTOL,
                  maxiter: int = MAXITER, what: str = "root") -> np.ndarray:
    """Elementwise bracketed roots of a vectorised function ``fn(x, *args)``.

    ``args`` are broadcast against the brackets; the solver passes only the
    still-active elements, so per-element data must go through ``args``.
    Every bracket must contain a sign change; failures raise with the first
    offending bracket in the message.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    lo, hi = np.broadcast_arrays(lo, hi)
    if lo.size == 0:
        return np.empty(lo.shape)
    res = find_root(fn, (lo, hi), args=args, tolerances=dict(xatol=xtol, xrtol=4 * np.finfo(float).eps,
                                                  fatol=0.0, frtol=0.0), maxiter=maxiter)
    status = np.asarray(res.status)
    if np.any(status == -1):
        i = int(np.flatnonzero(status.ravel() == -1)[0])
        f_lo, f_hi = (np.asarray(v).ravel()[i] for v in res.f_bracket)
        raise RootBracketError(f"{what}: no sign change", lo.ravel()[i], hi.ravel()[i], f_lo, f_hi)
    if np.any(status < 0):
        i = int(np.flatnonzero(status.ravel() < 0)[0])
        raise ConvergenceError(f"{what}: status {int(status.ravel()[i])} at bracket "
                               f"({lo.ravel()[i]:.6g}, {hi.ravel()[i]:.6g})")
    return np.asarray(res.x, dtype=float)


def integrate_1d(fn: Callable[[float], float], a: float, b: float, *, tol: float = QUAD_TOL,
                 what: str = "integral") -> float:
    """Adaptive quadrature; infinite ends are mapped through x = tan(theta)."""
    if a == b:
        return 0.0
    sign = 1.0
    if a > b:
        a, b, sign = b, a, -1.0
    if math.isinf(a) or math.isinf(b):
        lo = math.atan(a) if not math.isinf(a) else -math.pi / 2
        hi = math.atan(b) if not math.isinf(b) else math.pi / 2

        def g(theta: float) -> float:
            c = math.cos(theta)
            if c == 0.0:
                return 0.0
            val = fn(math.tan(theta))
            return val / (c * c) if val != 0.0 else 0.0

        val, err = integrate.quad(g, lo, hi, epsabs=tol, epsrel=tol, limit=500)
    else:
        val, err = integrate.quad(fn, a, b, epsabs=tol, epsrel=tol, limit=500)
    if err > 1e3 * tol and err > 1e-5 * abs(val):
        warnings.warn(f"{what}: estimated error {err:.2e} for value {val:.6g}", QuadratureWarning)
    return sign * val


def ks_distance(samples: np.ndarray, cdf: Callable[[np.ndarray], np.ndarray]) -> float:
    """Kolmogorov-Smirnov sup distance between an empirical sample and a CDF."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        return float("nan")
    return float(stats.kstest(samples, cdf).statistic)


def wasserstein1(a: np.ndarray, b: np.ndarray) -> float:
    return float(stats.wasserstein_distance(np.asarray(a, float), np.asarray(b, float)))
