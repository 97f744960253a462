"""Continuous-time characteristics: phase curve x1(t), boundary m_t, T_u, j_u, j_d.

All generic equations are used in their integrated-by-parts form, which stays
valid when the support moves with t (the uniform family):

* x1(t):   int_{x1}^{r_t} dtF(t, xi) dxi = 0
* T_u:     (x - y) dtF(t, y) + int_x^y dtF(t, xi) dxi = 0,   y in (m_t, r_t)
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import optimize
from scipy.interpolate import PchipInterpolator
from scipy.special import ndtr

from .coupling1p import compute_phase_point, pair_from_family
from .errors import DomainError, InversionError, MultipleExtrema, RootBracketError, ValidationError
from .marginals import (BachelierFamily, GBMFamily, MarginalFamily, TabulatedFamily,
                        UniformFamily, _phi)
from .numerics import XTOL, bracket_roots, brent_root

TAIL_U = 1.0 - 1e-10


class Regime(str, Enum):
    SUPERMARTINGALE = "Supermartingale"
    MARTINGALE = "Martingale"
    DIAGONAL = "Diagonal"


def _hi(family: MarginalFamily, t: float) -> float:
    r = family.r(t)
    return r if math.isfinite(r) else float(family.quantile(t, TAIL_U))


def _lo(family: MarginalFamily, t: float) -> float:
    ell = family.ell(t)
    return ell if math.isfinite(ell) else float(family.quantile(t, 1.0 - TAIL_U))


# ----------------------------------------------------------------- boundary m_t


def solve_m_curve(family: MarginalFamily, t: float) -> float:
    """Minimiser of x -> dtF(t, x)."""
    if isinstance(family, UniformFamily):
        return math.exp(t)
    if isinstance(family, BachelierFamily):
        return math.sqrt(t * (t + 1))
    if isinstance(family, GBMFamily):
        return math.exp(math.sqrt(t * (t + 1)))
    return _m_numeric(family, t)


def _m_numeric(family: MarginalFamily, t: float, n: int = 2001) -> float:
    lo = float(family.quantile(t, 1e-4))
    hi = float(family.quantile(t, 1 - 1e-4))
    xs = np.linspace(lo, hi, n)
    d = np.asarray(family.dtF(t, xs), float)
    slope = np.diff(d)
    # local minima of dtF: slope turns from negative to positive
    minima = np.flatnonzero((slope[:-1] < 0) & (slope[1:] >= 0)) + 1
    if minima.size > 1:
        depth = d[minima]
        # ignore numerical ripples that are negligible next to the global minimum
        sig = minima[depth < depth.min() + 1e-6 * max(1.0, abs(depth.min()))]
        if sig.size > 1:
            raise MultipleExtrema(f"t={t}: dtF has {minima.size} local minima")
    k = int(np.argmin(d))
    a, b = xs[max(k - 1, 0)], xs[min(k + 1, n - 1)]
    res = optimize.minimize_scalar(lambda x: float(family.dtF(t, x)), bounds=(a, b), method="bounded",
                                   options={"xatol": 1e-10})
    return float(res.x)


# ------------------------------------------------------------- phase curve x1(t)


def x1_uniform(t: float) -> float:
    a = math.exp(t)
    return -a / (1 + 2 * a)


def x1_bachelier_transcendental(t: float) -> float:
    """Root of 2 sqrt(t) (1 - Phi(z)) = phi(z), mapped back by x = sqrt(t) z - t."""
    s = math.sqrt(t)
    z = brent_root(lambda z: 2 * s * ndtr(-z) - float(_phi(z)), -12.0, 2 * s, xtol=1e-14,
                   what="Bachelier boundary")
    return s * z - t


def x1_gbm_transcendental(t: float) -> float:
    """Root of sqrt(t) (1 - Phi(w)) = phi(w), mapped back by x = exp(sqrt(t) w)."""
    s = math.sqrt(t)
    w = brent_root(lambda w: s * ndtr(-w) - float(_phi(w)), -12.0, 12.0, xtol=1e-14,
                   what="GBM boundary")
    return math.exp(s * w)


def x1_residual(family: MarginalFamily, t: float, x):
    """int_x^{r_t} dtF(t, xi) dxi."""
    return family.dtF_integral(t, x, family.r(t))


def solve_x1_generic(family: MarginalFamily, t: float, *, n_scan: int = 129) -> float:
    """Root of the phase-curve integral on (ell_t, m_t), by quadrature-free closed integrals when available."""
    lo, m = _lo(family, t), solve_m_curve(family, t)
    # For moving supports the residual also vanishes at m_t = r_t, so take the
    # first downward crossing on a probability grid.
    ps = np.linspace(float(family.F(t, lo)), float(family.F(t, m)), n_scan)
    xs = np.asarray(family.quantile(t, ps), float)
    xs[0], xs[-1] = lo, m
    vals = np.asarray(x1_residual(family, t, xs), float)
    if not vals[0] > 0:
        raise RootBracketError(f"x1 at t={t}: residual not positive at the lower end", lo, m,
                               float(vals[0]), float(vals[-1]))
    neg = np.flatnonzero(vals[1:] < 0)
    if neg.size == 0:
        raise RootBracketError(f"x1 at t={t}: residual never negative below m_t", lo, m,
                               float(vals[0]), float(vals[-1]))
    k = int(neg[0])
    return brent_root(lambda x: float(x1_residual(family, t, x)), float(xs[k]), float(xs[k + 1]),
                      xtol=1e-13, what=f"x1 at t={t}")


def solve_x1_curve(family: MarginalFamily, t: float, *, method: str = "auto") -> float:
    """Phase-transition point x1(t).

    ``method`` is ``"auto"`` (closed form or family-specific equation when
    available), ``"generic"`` (integral root) or ``"transcendental"``.
    """
    family.check_time(t)
    if method == "generic":
        return solve_x1_generic(family, t)
    if isinstance(family, UniformFamily):
        return x1_uniform(t)
    if isinstance(family, BachelierFamily):
        return x1_bachelier_transcendental(t)
    if isinstance(family, GBMFamily):
        return x1_gbm_transcendental(t)
    if method == "transcendental":
        raise ValidationError(f"no family-specific boundary equation for {family.name}")
    return solve_x1_generic(family, t)


def solve_x1_eps(family: MarginalFamily, t: float, eps: float) -> tuple[float, float]:
    """One-period phase point (x1^eps(t), y1^eps(t)) of the pair (mu_t, mu_{t+eps})."""
    return compute_phase_point(pair_from_family(family, t, t + eps))


# ----------------------------------------------------------------------- T_u


def tu_residual(family: MarginalFamily, t: float, x, y):
    """(x - y) dtF(t, y) + int_x^y dtF(t, xi) dxi."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    return (x - y) * family.dtF(t, y) + family.dtF_integral(t, x, y)


@dataclass
class _Slice:
    t: float
    x1: float
    m: float
    interp: PchipInterpolator | None


@dataclass
class ContCharacteristics:
    """SDE coefficients of the limiting decreasing-coupling process.

    ``x1`` and ``m`` are exact per call for built-in families (closed forms or
    one scalar root); tabulated families use a PCHIP curve on ``n_grid`` times.
    ``T_u`` slices are cached per time and interpolated in the logit coordinate
    ``log((x - x1)/(m - x))``.
    """

    family: MarginalFamily
    n_grid: int = 256
    slice_nodes: int = 400
    _x1_interp: PchipInterpolator | None = field(default=None, repr=False)
    _m_interp: PchipInterpolator | None = field(default=None, repr=False)
    _slices: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if isinstance(self.family, TabulatedFamily):
            ts = np.linspace(self.family.t_min, self.family.t_max, self.n_grid)
            x1s = np.array([solve_x1_generic(self.family, t) for t in ts])
            ms = np.array([solve_m_curve(self.family, t) for t in ts])
            self._x1_interp = PchipInterpolator(ts, x1s)
            self._m_interp = PchipInterpolator(ts, ms)
            jumps = np.abs(np.diff(x1s))
            if jumps.size > 2 and jumps.max() > 10 * max(np.median(jumps), 1e-12):
                import warnings
                warnings.warn("x1 curve has a jump larger than 10x the grid median", RuntimeWarning)

    @property
    def t_min(self) -> float:
        return self.family.t_min

    @property
    def is_uniform(self) -> bool:
        return isinstance(self.family, UniformFamily)

    def x1_curve(self, t: float) -> float:
        if self._x1_interp is not None:
            return float(self._x1_interp(t))
        return solve_x1_curve(self.family, t)

    def m_curve(self, t: float) -> float:
        if self._m_interp is not None:
            return float(self._m_interp(t))
        return solve_m_curve(self.family, t)

    def regime(self, t: float, x):
        """Supermartingale at or below x1, martingale in the band, diagonal from m_t up."""
        x = np.asarray(x, float)
        x1, m = self.x1_curve(t), self.m_curve(t)
        out = np.where(x <= x1, Regime.SUPERMARTINGALE.value,
                       np.where(x < m, Regime.MARTINGALE.value, Regime.DIAGONAL.value))
        return out.item() if out.ndim == 0 else out

    # -- T_u
    def solve_Tu_exact(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, float)
        x1, m = self.x1_curve(t), self.m_curve(t)
        if np.any((x <= x1) | (x >= m)):
            raise DomainError(f"T_u at t={t}: points outside the band ({x1:.6g}, {m:.6g})")
        if self.is_uniform:
            return np.full(x.shape, math.exp(t))
        xa = np.atleast_1d(x)
        hi = _hi(self.family, t)
        lo = np.full(xa.shape, m)
        his = np.full(xa.shape, hi)
        f_hi = tu_residual(self.family, t, xa, his)
        out = np.empty(xa.shape)
        above = f_hi > 0
        out[above] = hi
        idx = np.flatnonzero(~above)
        if idx.size:
            f_lo = tu_residual(self.family, t, xa[idx], lo[idx])
            flat = f_lo <= 0
            out[idx[flat]] = m
            solve = idx[~flat]
            out[solve] = bracket_roots(lambda y, xx: tu_residual(self.family, t, xx, y), lo[solve], his[solve],
                                       args=(xa[solve],), what=f"T_u at t={t}")
        return out.reshape(x.shape)

    def _slice(self, t: float) -> _Slice:
        key = float(t)
        sl = self._slices.get(key)
        if sl is not None:
            return sl
        with self._lock:
            sl = self._slices.get(key)
            if sl is None:
                sl = self._build_slice(key)
                if len(self._slices) > 4096:
                    self._slices.clear()
                self._slices[key] = sl
        return sl

    def _build_slice(self, t: float) -> _Slice:
        x1, m = self.x1_curve(t), self.m_curve(t)
        if self.is_uniform:
            return _Slice(t, x1, m, None)
        z = np.linspace(-10.0, 12.0, self.slice_nodes)
        xs = x1 + (m - x1) / (1.0 + np.exp(-z))
        keep = (xs > x1) & (xs < m)
        z, xs = z[keep], xs[keep]
        tu = self.solve_Tu_exact(t, xs)
        # near m the root loses resolution to rounding; drop nodes that are not strictly above m
        gap = tu - m
        good = gap > 1e-12 * max(1.0, abs(m))
        good &= np.concatenate([[True], gap[1:] < np.minimum.accumulate(np.where(good, gap, np.inf))[:-1]])
        z, gap = z[good], gap[good]
        w = np.log(gap)
        return _Slice(t, x1, m, PchipInterpolator(z, w, extrapolate=True))

    def Tu(self, t: float, x) -> np.ndarray:
        """Jump destination on the band (cached slice interpolation)."""
        x = np.asarray(x, float)
        if self.is_uniform:
            return np.full(x.shape, math.exp(t))
        sl = self._slice(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.log((x - sl.x1) / (sl.m - x))
        z = np.clip(z, -40.0, 40.0)
        # near m, log(T_u - m) is asymptotically linear in z: extend with the end slope
        z_lo, z_hi = sl.interp.x[0], sl.interp.x[-1]
        slope = float(sl.interp(z_hi, 1))
        w = sl.interp(np.clip(z, z_lo, z_hi)) + slope * np.maximum(z - z_hi, 0.0)
        return sl.m + np.exp(w)

    def Tu_inverse(self, t: float, y) -> np.ndarray:
        """Band point x with Tu(t, x) = y, for y in (m_t, Tu(t, x1+))."""
        y = np.asarray(y, float)
        sl = self._slice(t)
        if sl.interp is None:
            raise DomainError("T_u is constant on the band; no inverse")
        zs = sl.interp.x
        ws = sl.interp(zs)
        # keep the strictly decreasing part (the ends can be clamped flat)
        keep = np.concatenate([[True], ws[1:] < np.minimum.accumulate(ws)[:-1]])
        zs, ws = zs[keep], ws[keep]
        if zs.size < 0.5 * sl.interp.x.size:
            raise InversionError(f"T_u slice at t={t} is not strictly decreasing")
        # w is decreasing in z: clamp targets into the node range, then root the spline
        wy = np.clip(np.log(np.maximum(y - sl.m, 1e-300)), ws[-1], ws[0])
        flat = np.atleast_1d(wy)
        zq = bracket_roots(lambda z, target: sl.interp(z) - target, np.full(flat.shape, zs[0]),
                           np.full(flat.shape, zs[-1]), args=(flat,), xtol=1e-12, what="T_u inverse")
        return (sl.x1 + (sl.m - sl.x1) / (1.0 + np.exp(-zq))).reshape(np.shape(y))

    # -- coefficients
    def coefficients(self, t: float, x):
        """(jd, ju, intensity) arrays; zero in the diagonal region."""
        x = np.asarray(x, float)
        fam = self.family
        x1, m = self.x1_curve(t), self.m_curve(t)
        jd = np.zeros(x.shape)
        ju = np.zeros(x.shape)
        lam = np.zeros(x.shape)
        low = x <= x1
        band = (x > x1) & (x < m)
        if self.is_uniform:
            a = math.exp(t)
            rate = 0.5 * (1 + 2 * a) / (1 + a)
            ju = np.where(band, a - x, 0.0)
            lam = np.where(band, rate, 0.0)
            jd = np.where(low, (a * a - x * (1 + 2 * a)) / (1 + a), lam * ju)
            return jd, ju, lam
        if np.any(low):
            xl = x[low]
            if isinstance(fam, BachelierFamily):
                jd[low] = (t - xl) / (2 * t)
            elif isinstance(fam, GBMFamily):
                jd[low] = xl * (t - np.log(xl)) / (2 * t)
            else:
                jd[low] = fam.dtF(t, xl) / fam.f(t, xl)
        if np.any(band):
            xb = x[band]
            tu = self.Tu(t, xb)
            ju[band] = tu - xb
            jd[band] = (fam.dtF(t, xb) - fam.dtF(t, tu)) / fam.f(t, xb)
            lam[band] = jd[band] / ju[band]
        return jd, ju, lam


def solve_Tu(chars: ContCharacteristics, t: float, x: float) -> float:
    return float(chars.solve_Tu_exact(t, np.asarray(x, float)))


def eval_jd_ju(chars: ContCharacteristics, t: float, x: float) -> tuple[float, float, float]:
    if not x < chars.m_curve(t):
        raise DomainError(f"coefficients undefined at or above m_t (t={t}, x={x})")
    if not x > chars.family.ell(t):
        raise DomainError(f"x={x} below the support at t={t}")
    jd, ju, lam = chars.coefficients(t, np.array([x], float))
    return float(jd[0]), float(ju[0]), float(lam[0])


def eval_increasing_chars_uniform(t: float, x, family: MarginalFamily | None = None):
    """(jd, ju) of the increasing coupling limit: jumps down by jd at rate ju/jd, drift up at ju."""
    if family is not None and not isinstance(family, UniformFamily):
        raise ValidationError("increasing characteristics are implemented for the uniform family only")
    a = math.exp(t)
    x = np.asarray(x, float)
    jd = a * a + x
    ju = 0.5 * (1 + 2 * a) * (x + a * a) / (1 + a)
    if jd.ndim == 0:
        return float(jd), float(ju)
    return jd, ju
