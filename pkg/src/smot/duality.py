"""Reward functional, dual superhedging strategies and the optimal value.

One-period dual triple (phi, psi, h) of the decreasing coupling, and the
continuous-time dual (h*, psi*, lambda0) of the limiting process, with a
pathwise superhedge verifier.

Sign convention: the drift of the limiting process is ``-jd``, so the static
part of the superhedge is

    Psi*(X) = psi*(1, X_1) - psi*(t0, X_t0)
              - int (d_t psi* - jd 1{X < m_t} d_x psi*) dt
              + int intensity 1{band} (psi* - psi*(., T_u) + c(., T_u)) dt,

and lambda0 = -d_t psi* + jd 1{x < m_t} d_x psi* + intensity 1{band} (psi* - psi*(., T_u) + c(., T_u)).
"""

from __future__ import annotations

import math
import threading
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicHermiteSpline, PchipInterpolator

from .coupling1p import OnePeriodCoupling
from .curve import ContCharacteristics
from .errors import QuadratureWarning, ValidationError
from .simulate import JumpPath, PathEnsemble

# --------------------------------------------------------------------------- costs


@dataclass(frozen=True)
class CostFunction:
    name: str
    c: Callable
    cx: Callable
    cy: Callable
    cxy: Callable | None = None


def default_cost() -> CostFunction:
    """c(x, y) = 1 - (y - x) - exp(-(y - x))."""
    return CostFunction(
        "default",
        c=lambda x, y: 1.0 - (y - x) - np.exp(x - y),
        cx=lambda x, y: 1.0 - np.exp(x - y),
        cy=lambda x, y: -1.0 + np.exp(x - y),
        cxy=lambda x, y: np.exp(x - y),
    )


def zero_cost() -> CostFunction:
    zero = lambda x, y: np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)
    return CostFunction("zero", c=zero, cx=zero, cy=zero, cxy=zero)


def squared_cost() -> CostFunction:
    """(y - x)^2; violates the cross-derivative sign condition (c_xy = -2)."""
    return CostFunction(
        "squared",
        c=lambda x, y: (y - x) ** 2,
        cx=lambda x, y: -2.0 * (y - x),
        cy=lambda x, y: 2.0 * (y - x),
        cxy=lambda x, y: np.full(np.broadcast(np.asarray(x), np.asarray(y)).shape, -2.0),
    )


COSTS = {"default": default_cost, "zero": zero_cost, "squared": squared_cost}


def cost_from_name(name: str) -> CostFunction:
    try:
        return COSTS[name]()
    except KeyError:
        raise ValidationError(f"unknown cost {name!r}; choose from {sorted(COSTS)}") from None


class CostAssumptionError(ValidationError):
    """The cost fails c(x,x) = c_y(x,x) = 0, c_xy > 0 or c_xyy < 0 at a grid point."""


def is_zero_cost(cost: CostFunction, grid=np.linspace(-3, 3, 13)) -> bool:
    x, y = np.meshgrid(grid, grid)
    return bool(np.all(np.asarray(cost.c(x, y)) == 0))


def check_cost_assumption(cost: CostFunction, grid=np.linspace(-3.0, 3.0, 25), *, h: float = 1e-3,
                          allow_zero: bool = True) -> None:
    """Finite-difference check of the structural cost conditions on a grid.

    The zero cost is degenerate (c_xy = 0) and accepted when ``allow_zero``.
    """
    if allow_zero and is_zero_cost(cost, grid):
        return
    g = np.asarray(grid, float)
    diag_c = np.asarray(cost.c(g, g), float)
    diag_cy = np.asarray(cost.cy(g, g), float)
    for vals, what in ((diag_c, "c(x,x) = 0"), (diag_cy, "c_y(x,x) = 0")):
        bad = np.flatnonzero(np.abs(vals) > 1e-10)
        if bad.size:
            x = g[bad[0]]
            raise CostAssumptionError(f"cost {cost.name!r} violates the cost assumption {what} at x={x:.6g}")
    x, y = np.meshgrid(g, g, indexing="ij")
    c = cost.c
    cxy = (c(x + h, y + h) - c(x + h, y - h) - c(x - h, y + h) + c(x - h, y - h)) / (4 * h * h)
    bad = np.argwhere(cxy <= 0)
    if bad.size:
        i, j = bad[0]
        raise CostAssumptionError(f"cost {cost.name!r} violates the cost assumption c_xy > 0 at "
                                  f"(x, y) = ({g[i]:.6g}, {g[j]:.6g}): c_xy = {cxy[i, j]:.6g}")
    d = lambda yy: (c(x + h, yy + h) - c(x + h, yy - h) - c(x - h, yy + h) + c(x - h, yy - h)) / (4 * h * h)
    cxyy = (d(y + h) - d(y - h)) / (2 * h)
    bad = np.argwhere(cxyy >= 0)
    if bad.size:
        i, j = bad[0]
        raise CostAssumptionError(f"cost {cost.name!r} violates the cost assumption c_xyy < 0 at "
                                  f"(x, y) = ({g[i]:.6g}, {g[j]:.6g}): c_xyy = {cxyy[i, j]:.6g}")


# ------------------------------------------------------------------------ payoff


def payoff_functional(path: JumpPath, cost: CostFunction) -> float:
    """Sum of c(pre, post) over jumps; continuous parts contribute nothing for these paths."""
    ev = path.jumps()
    if ev.size == 0:
        return 0.0
    return float(np.sum(cost.c(ev[:, 1], ev[:, 2])))


def payoff_ensemble(ensemble: PathEnsemble, cost: CostFunction) -> np.ndarray:
    w = np.asarray(cost.c(ensemble.event_pre, ensemble.event_post), float)
    return np.bincount(ensemble.event_path, weights=w, minlength=ensemble.n_paths)


# ----------------------------------------------------------------- helpers


def _chebyshev_band(p1: float, p2: float, n: int):
    """theta in [0, pi] uniform, p = p1 + (p2 - p1)(1 - cos theta)/2 and dp/dtheta."""
    theta = np.linspace(0.0, np.pi, n + 1)
    p = p1 + (p2 - p1) * 0.5 * (1.0 - np.cos(theta))
    dp = (p2 - p1) * 0.5 * np.sin(theta)
    return theta, p, dp


class _Spline:
    """Monotone cubic interpolant, clipped to the node range, with a fixed value below.

    With ``dydx`` the known slopes are used (cubic Hermite); otherwise PCHIP.
    """

    def __init__(self, x, y, lo_value=None, dydx=None):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        order = np.argsort(x, kind="stable")
        x, y = x[order], y[order]
        keep = np.concatenate([[True], np.diff(x) > 0])
        self.x, self.y = x[keep], y[keep]
        if dydx is None:
            self.f = PchipInterpolator(self.x, self.y)
        else:
            self.f = CubicHermiteSpline(self.x, self.y, np.asarray(dydx, float)[order][keep])
        self.lo_value = self.y[0] if lo_value is None else lo_value

    def __call__(self, z):
        z = np.asarray(z, float)
        inside = np.clip(z, self.x[0], self.x[-1])
        out = self.f(inside)
        return np.where(z < self.x[0], self.lo_value, out)


# -------------------------------------------------------------- one-period dual


@dataclass
class OnePeriodDual:
    """(phi, psi, h) for the decreasing coupling; psi pinned to 0 at m_upper."""

    coupling: OnePeriodCoupling
    cost: CostFunction
    n_nodes: int = 1200

    def __post_init__(self):
        c, cost = self.coupling, self.cost
        mu, nu = c.pair.mu, c.pair.nu
        x1, mbar = c.x1, c.pair.m_upper
        self.x1, self.mbar = x1, mbar
        p1, pm = float(mu.cdf(x1)), float(mu.cdf(mbar))
        self._band = pm > p1
        if self._band:
            theta, p, dp = _chebyshev_band(p1, pm, self.n_nodes)
            xs = mu.quantile(p[1:-1])
            ok = c.in_band(xs)
            xs, th, dpi = xs[ok], theta[1:-1][ok], dp[1:-1][ok]
            tu = c.solve_T_u(xs)
            td = np.minimum(c.g(xs, tu), xs)
            # nodes whose T_u sits at the numerical ceiling are unreliable
            ceiling = np.zeros(xs.shape, bool) if math.isfinite(nu.r) else tu >= c._t_hi - 1e-12 * abs(c._t_hi)
            hprime = (cost.cx(xs, tu) - cost.cx(xs, td)) / (tu - td)
            # integrate h' dx = h' / f_mu dp over a uniform theta grid
            integrand = np.concatenate([[0.0], hprime / mu.pdf(xs) * dpi, [0.0]])
            thetas = np.concatenate([[0.0], th, [np.pi]])
            hvals = integrate.cumulative_simpson(integrand, x=thetas, initial=0.0)
            self._bx = xs
            self._bh = hvals[1:-1]
            h_m = float(hvals[-1])
            self.h_band = _Spline(np.concatenate([[x1], xs, [mbar]]), np.concatenate([[0.0], self._bh, [h_m]]),
                                  lo_value=0.0)
            self._tu, self._td = tu, td
            # continuation above m_upper along y = T_u(x)
            keep = ~ceiling
            ya = tu[keep]
            ha = self._bh[keep] - cost.cy(xs[keep], ya)
            self.h_above = _Spline(np.concatenate([[mbar], ya]), np.concatenate([[h_m], ha]))
            self.h_m = h_m
            # psi above m_upper: psi(y) = -int_{mbar}^y h
            ys = self.h_above.x
            anti = self.h_above.f.antiderivative()
            self._psi_above_top = (ys[-1], -float(anti(ys[-1]) - anti(mbar)), float(self.h_above.y[-1]))
            self._anti_above = anti
            # psi on [y1, mbar) from equality on both support points
            psi_tu = self.psi_above(tu)
            psi_td = psi_tu - cost.c(xs, tu) + cost.c(xs, td) + self._bh * (tu - td)
            self._psi_mid = _Spline(np.concatenate([td[keep], [mbar]]), np.concatenate([psi_td[keep], [0.0]]))
            self._mid_lo = float(td[keep][0])
            psi_y1 = float(psi_td[keep][0])
        else:
            self.h_m = 0.0
            self._mid_lo = mbar
            psi_y1 = 0.0
        # psi below y1 along the quantile map, integrated downward in probability
        self.y1 = c.y1 if self._band else mbar
        self._quantile_region(psi_y1, self._mid_lo)

    def _quantile_region(self, psi_start: float, y_start: float):
        c, cost = self.coupling, self.cost
        mu, nu = c.pair.mu, c.pair.nu
        p_hi = float(nu.cdf(y_start))
        p_lo = 1e-12
        if p_hi <= p_lo:
            self._psi_low = None
            return
        theta, p, dp = _chebyshev_band(p_lo, p_hi, self.n_nodes)
        y = nu.quantile(p)
        x = mu.quantile(p)
        slope = cost.cy(x, y)
        vals = slope / nu.pdf(y) * dp
        cum = integrate.cumulative_simpson(vals, x=theta, initial=0.0)
        psi = psi_start - (cum[-1] - cum)
        self._psi_low = _Spline(y, psi)
        self._psi_low_slope = float(slope[0])

    def h(self, x):
        x = np.asarray(x, float)
        if not self._band:
            return np.zeros(x.shape)
        return np.where(x <= self.x1, 0.0, np.where(x < self.mbar, self.h_band(x), self.h_above(x)))

    def psi_above(self, y):
        y = np.asarray(y, float)
        y_top, psi_top, h_top = self._psi_above_top
        inside = -(self._anti_above(np.clip(y, self.mbar, y_top)) - self._anti_above(self.mbar))
        return np.where(y > y_top, psi_top - h_top * (y - y_top), inside)

    def psi(self, y):
        y = np.asarray(y, float)
        out = np.zeros(y.shape)
        if self._band:
            out = np.where(y >= self.mbar, self.psi_above(y), self._psi_mid(y))
        low = y < self._mid_lo
        if self._psi_low is not None and np.any(low):
            lo = self._psi_low
            below = lo.y[0] + self._psi_low_slope * (y - lo.x[0])
            out = np.where(low, np.where(y < lo.x[0], below, lo(y)), out)
        return out

    def phi(self, x):
        c, cost = self.coupling, self.cost
        x = np.asarray(x, float)
        td, tu, q = c.maps(x)
        band = c.in_band(x)
        low = x <= self.x1
        tu_safe = np.where(band, tu, x)
        up = cost.c(x, tu_safe) - self.psi(tu_safe)
        dn = cost.c(x, td) - self.psi(td)
        out = np.where(band, q * up + (1 - q) * dn, -self.psi(x))
        return np.where(low, dn, out)

    def residual(self, x, y):
        """phi(x) + psi(y) + h(x)(y - x) - c(x, y)."""
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        return self.phi(x) + self.psi(y) + self.h(x) * (y - x) - self.cost.c(x, y)

    def __iter__(self):
        yield self.phi
        yield self.psi
        yield self.h

    # -- integrals
    def _quad_p(self, fn, m, breaks):
        pts = sorted({float(b) for b in breaks if 0 < b < 1})
        edges = [0.0] + pts + [1.0]
        total = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            if b <= a:
                continue
            res = integrate.tanhsinh(lambda p: np.asarray(fn(m.quantile(p)), float), a, b,
                                     rtol=1e-11, atol=1e-14, maxlevel=12)
            if not res.success and res.error > 1e-9 * max(1.0, abs(float(res.integral))):
                warnings.warn(f"dual quadrature on [{a:.3g}, {b:.3g}] stopped with error {res.error:.2e}",
                              QuadratureWarning)
            total += float(res.integral)
        return total

    def expected_cost(self) -> float:
        c, cost = self.coupling, self.cost
        mu = c.pair.mu

        def kernel(x):
            td, tu, q = c.maps(x)
            band = c.in_band(x)
            tu_s = np.where(band, tu, x)
            return q * cost.c(x, tu_s) + (1 - q) * cost.c(x, td)

        return self._quad_p(kernel, mu, [mu.cdf(self.x1), mu.cdf(self.mbar)])

    def mu_phi(self) -> float:
        mu = self.coupling.pair.mu
        return self._quad_p(self.phi, mu, [mu.cdf(self.x1), mu.cdf(self.mbar)])

    def nu_psi(self) -> float:
        nu = self.coupling.pair.nu
        return self._quad_p(self.psi, nu, [nu.cdf(self.y1), nu.cdf(self._mid_lo), nu.cdf(self.mbar)])

    def duality_gap(self) -> dict:
        ec, a, b = self.expected_cost(), self.mu_phi(), self.nu_psi()
        return {"expected_cost": ec, "mu_phi": a, "nu_psi": b,
                "relative_gap": abs(ec - a - b) / max(abs(ec), 1e-300)}


def build_one_period_dual(coupling: OnePeriodCoupling, cost: CostFunction, n_nodes: int = 1200) -> OnePeriodDual:
    check_cost_assumption(cost)
    return OnePeriodDual(coupling, cost, n_nodes)


# --------------------------------------------------------------- continuous dual


@dataclass
class DualSlice:
    t: float
    x1: float
    m: float
    h: _Spline
    anti: Callable
    x_top: float
    h_top: float
    psi_top: float
    pin: float

    def h_eval(self, x):
        x = np.asarray(x, float)
        val = np.where(x >= self.x_top, self.h_top, self.h(x))
        return np.where(x <= self.x1, 0.0, val)

    def psi_eval(self, x):
        x = np.asarray(x, float)
        inside = -(self.anti(np.clip(x, self.x1, self.x_top)) - self.anti(self.x1))
        val = np.where(x > self.x_top, self.psi_top - self.h_top * (x - self.x_top), inside)
        return self.pin + np.where(x <= self.x1, 0.0, val)


@dataclass
class DualStrategy:
    """Continuous-time dual (h*, psi*, lambda0) built slice by slice in t.

    h*(t, .) is integrated from 0 at x1(t) across the band, continued above
    m_t through the inverse of T_u and held constant beyond the last node.
    psi*(t, .) = pin - int_{x1(t)}^x h*, so d_x psi* = -h* holds exactly for
    the stored spline.
    """

    chars: ContCharacteristics
    cost: CostFunction
    n_nodes: int = 400
    pin: float = 0.0
    dt_fd: float = 1e-4
    _slices: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def slice(self, t: float) -> DualSlice:
        key = float(t)
        sl = self._slices.get(key)
        if sl is None:
            with self._lock:
                sl = self._slices.get(key)
                if sl is None:
                    sl = self._build(key)
                    if len(self._slices) > 8192:
                        self._slices.clear()
                    self._slices[key] = sl
        return sl

    def _build(self, t: float) -> DualSlice:
        ch, cost = self.chars, self.cost
        x1, m = ch.x1_curve(t), ch.m_curve(t)
        z = np.linspace(-10.0, 12.0, self.n_nodes)
        sig = 1.0 / (1.0 + np.exp(-z))
        xs = x1 + (m - x1) * sig
        keep = (xs > x1) & (xs < m)
        z, xs, sig = z[keep], xs[keep], sig[keep]
        tu = ch.Tu(t, xs)
        g = (cost.cx(xs, tu) - cost.cx(xs, xs)) / (tu - xs)

        def integrand(zz):
            sg = 1.0 / (1.0 + np.exp(-zz))
            xx = x1 + (m - x1) * sg
            yy = ch.Tu(t, xx)
            return (cost.cx(xx, yy) - cost.cx(xx, xx)) / (yy - xx) * (m - x1) * sg * (1 - sg)

        # 5-point Gauss-Legendre per node interval keeps the node values accurate enough for slopes
        gl_x, gl_w = np.polynomial.legendre.leggauss(5)
        mid, half = 0.5 * (z[1:] + z[:-1]), 0.5 * np.diff(z)
        pieces = (integrand(mid[:, None] + half[:, None] * gl_x[None, :]) @ gl_w) * half
        cum = np.concatenate([[0.0], np.cumsum(pieces)])
        # first node sits a tiny distance above x1; add that sliver
        hv = cum + g[0] * (xs[0] - x1)
        slope_m = g[-1]
        h_m = float(hv[-1] + slope_m * (m - xs[-1]))
        # on the band the slope g is known exactly, so interpolate with Hermite cubics
        nodes_x = [np.array([x1]), xs, np.array([m])]
        nodes_h = [np.array([0.0]), hv, np.array([h_m])]
        nodes_d = [g[:1], g, np.array([slope_m])]
        if not ch.is_uniform:
            # continuation above m_t: h*(T_u(x)) = h*(x) - c_y(x, T_u(x)); slopes from PCHIP
            ya = tu[::-1]
            ha = (hv - cost.cy(xs, tu))[::-1]
            ok = np.concatenate([[True], np.diff(ya) > 0]) & (ya > m)
            ya, ha = ya[ok], ha[ok]
            if ya.size >= 2:
                nodes_x.append(ya)
                nodes_h.append(ha)
                pchip = PchipInterpolator(np.concatenate([[m], ya]), np.concatenate([[h_m], ha]))
                nodes_d.append(pchip(ya, 1))
        X = np.concatenate(nodes_x)
        H = np.concatenate(nodes_h)
        spline = _Spline(X, H, lo_value=0.0, dydx=np.concatenate(nodes_d))
        anti = spline.f.antiderivative()
        x_top = float(spline.x[-1])
        h_top = float(spline.y[-1])
        psi_top = -float(anti(x_top) - anti(x1))
        return DualSlice(t, x1, m, spline, anti, x_top, h_top, psi_top, self.pin)

    # -- pointwise fields
    def h_star(self, t: float, x):
        return self.slice(t).h_eval(x)

    def psi_star(self, t: float, x):
        return self.slice(t).psi_eval(x)

    def dpsi_dt(self, t: float, x, step: float | None = None):
        step = self.dt_fd if step is None else step
        fam = self.chars.family
        lo, hi = max(fam.t_min, t - step), min(fam.t_max, t + step)
        return (self.psi_star(hi, x) - self.psi_star(lo, x)) / (hi - lo)

    def G(self, t: float, x, y):
        """psi*(y) - psi*(x) + h*(x)(y - x) - c(x, y) on the slice at t."""
        sl = self.slice(t)
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        return sl.psi_eval(y) - sl.psi_eval(x) + sl.h_eval(x) * (y - x) - self.cost.c(x, y)

    def compensator_integrand(self, t: float, x):
        """intensity 1{band} (psi* - psi*(T_u) + c(x, T_u))."""
        ch = self.chars
        x = np.asarray(x, float)
        x1, m = ch.x1_curve(t), ch.m_curve(t)
        band = (x > x1) & (x < m)
        out = np.zeros(x.shape)
        if np.any(band):
            sl = self.slice(t)
            xb = x[band]
            _, _, lam = ch.coefficients(t, xb)
            tu = ch.Tu(t, xb)
            out[band] = lam * (sl.psi_eval(xb) - sl.psi_eval(tu) + self.cost.c(xb, tu))
        return out

    def drift_integrand(self, t: float, x):
        """jd 1{x < m_t} d_x psi* = -jd 1{x < m_t} h*."""
        x = np.asarray(x, float)
        jd, _, _ = self.chars.coefficients(t, x)
        below = x < self.chars.m_curve(t)
        return np.where(below, -jd * self.h_star(t, x), 0.0)

    def lambda0(self, t: float, x):
        """Density of the static measure on (t_min, 1) times the line."""
        return -self.dpsi_dt(t, x) + self.drift_integrand(t, x) + self.compensator_integrand(t, x)


def build_continuous_dual(chars: ContCharacteristics, cost: CostFunction, *, n_nodes: int = 400,
                          pin: float = 0.0) -> DualStrategy:
    check_cost_assumption(cost)
    return DualStrategy(chars, cost, n_nodes=n_nodes, pin=pin)


# --------------------------------------------------------------- optimal value


def _band_integral(chars: ContCharacteristics, cost: CostFunction, t: float, n: int) -> float:
    """int over the band of intensity * c(x, T_u) dmu_t, in the probability coordinate."""
    fam = chars.family
    x1, m = chars.x1_curve(t), chars.m_curve(t)
    p1, pm = float(fam.F(t, x1)), float(fam.F(t, m))
    if pm <= p1:
        return 0.0
    nodes, weights = np.polynomial.legendre.leggauss(n)
    p = p1 + (pm - p1) * 0.5 * (nodes + 1.0)
    x = np.asarray(fam.quantile(t, p), float)
    x = np.clip(x, np.nextafter(x1, np.inf), np.nextafter(m, -np.inf))
    _, ju, lam = chars.coefficients(t, x)
    vals = lam * cost.c(x, x + ju)
    return float(0.5 * (pm - p1) * np.dot(weights, vals))


def optimal_value_quadrature(chars: ContCharacteristics, cost: CostFunction, *, n_t: int = 128,
                             n_x: int = 128) -> float:
    """Gauss-Legendre in t (n_t nodes) of the band integral (Gauss-Legendre in probability).

    For unbounded families T_u grows like sqrt(log) at x1(t), so the inner
    rule converges only algebraically; the warning fires when halving the
    inner order moves the value by more than 1e-4 relative.
    """
    if is_zero_cost(cost):
        return 0.0
    fam = chars.family
    a, b = fam.t_min, fam.t_max
    nodes, weights = np.polynomial.legendre.leggauss(n_t)
    ts = a + (b - a) * 0.5 * (nodes + 1.0)
    inner = np.array([_band_integral(chars, cost, t, n_x) for t in ts])
    value = 0.5 * (b - a) * float(np.dot(weights, inner))
    # error estimate: halve the inner order
    coarse = np.array([_band_integral(chars, cost, t, n_x // 2) for t in ts[:: max(1, n_t // 8)]])
    fine = inner[:: max(1, n_t // 8)]
    err = float(np.max(np.abs(coarse - fine))) * (b - a)
    if err > 1e-4 * abs(value):
        warnings.warn(f"optimal value quadrature: estimated error {err:.2e} for value {value:.6g}",
                      QuadratureWarning)
    return value


# --------------------------------------------------------- superhedge verification


@dataclass
class HedgeReport:
    residuals: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    tol: float

    @property
    def min(self) -> float:
        return float(self.residuals.min())

    @property
    def mean(self) -> float:
        return float(self.residuals.mean())

    @property
    def violation_fraction(self) -> float:
        return float(np.mean(self.residuals < -self.tol))

    def summary(self) -> dict:
        return {"min_residual": self.min, "mean_residual": self.mean,
                "violation_fraction": self.violation_fraction, "tol": self.tol,
                "n_paths": int(self.residuals.size)}


def _dense_arrays(ensemble: PathEnsemble, refine: int):
    """Fine grid with start-of-step values, end-of-step pre-jump values and drift rates."""
    if ensemble.values is None:
        raise ValidationError("superhedge verification needs an ensemble simulated with dense=True")
    grid, vals, drift, pre = ensemble.grid, ensemble.values, ensemble.drift, ensemble.pre_end
    if refine <= 1:
        return grid, vals[:, :-1], pre, drift, vals[:, 1:]
    k = grid.size - 1
    sub = np.linspace(0.0, 1.0, refine + 1)[:-1]
    fine = (grid[:-1, None] + np.diff(grid)[:, None] * sub[None, :]).ravel()
    fine = np.concatenate([fine, grid[-1:]])
    h_coarse = np.diff(grid)
    offs = (np.diff(grid)[:, None] * sub[None, :])  # (k, refine)
    start = vals[:, :-1, None] + drift[:, :, None] * offs[None, :, :]
    end = start + drift[:, :, None] * (h_coarse[None, :, None] / refine)
    end[:, :, -1] = pre
    nxt = np.concatenate([start[:, :, 1:], vals[:, 1:, None]], axis=2)
    n = vals.shape[0]
    rate = np.repeat(drift, refine, axis=1)
    return fine, start.reshape(n, k * refine), end.reshape(n, k * refine), rate, nxt.reshape(n, k * refine)


def verify_superhedge_on_paths(strategy: DualStrategy, ensemble: PathEnsemble, cost: CostFunction | None = None,
                               *, tol: float = 1e-3, refine: int = 1) -> HedgeReport:
    """Pathwise Psi*(X) + int h* dX - C(X) along each path.

    Time integrals use the trapezoid rule on the simulation grid (``refine``
    subdivides it); d_t psi* over a step is the slice difference; jump terms
    are explicit; the stochastic integral against drift uses the stored drift
    rate.
    """
    cost = strategy.cost if cost is None else cost
    grid, start, end, rate, nxt = _dense_arrays(ensemble, refine)
    n = start.shape[0]
    x0 = start[:, 0]
    static = -strategy.psi_star(grid[0], x0)
    stoch = np.zeros(n)
    payoff = np.zeros(n)
    for j in range(grid.size - 1):
        t0, t1 = grid[j], grid[j + 1]
        h = t1 - t0
        a, e, b, post = start[:, j], end[:, j], rate[:, j], nxt[:, j]
        s0, s1 = strategy.slice(t0), strategy.slice(t1)
        d_t = 0.5 * ((s1.psi_eval(a) - s0.psi_eval(a)) + (s1.psi_eval(e) - s0.psi_eval(e)))
        d_drift = 0.5 * h * (strategy.drift_integrand(t0, a) + strategy.drift_integrand(t1, e))
        d_comp = 0.5 * h * (strategy.compensator_integrand(t0, a) + strategy.compensator_integrand(t1, e))
        static += -d_t + d_drift + d_comp
        stoch += 0.5 * h * b * (s0.h_eval(a) + s1.h_eval(e))
        jump = post != e
        if np.any(jump):
            stoch[jump] += s1.h_eval(e[jump]) * (post[jump] - e[jump])
            payoff[jump] += cost.c(e[jump], post[jump])
    static += strategy.psi_star(grid[-1], nxt[:, -1])
    lhs = static + stoch
    return HedgeReport(lhs - payoff, lhs, payoff, tol)


# ------------------------------------------------------------ integrability proxy


def integrability_proxy(strategy: DualStrategy, *, n_t: int = 24, n_x: int = 200) -> dict:
    """int |lambda0| dmu_t dt over quantile windows [1e-3, 1-1e-3] and [1e-4, 1-1e-4]."""
    fam = strategy.chars.family
    ts = np.linspace(fam.t_min, fam.t_max, n_t + 2)[1:-1]

    def window(u):
        total = 0.0
        for t in ts:
            p = np.linspace(u, 1 - u, n_x)
            x = fam.quantile(t, p)
            total += np.trapezoid(np.abs(strategy.lambda0(t, x)), p)
        return total * (fam.t_max - fam.t_min) / n_t

    narrow, wide = window(1e-3), window(1e-4)
    growth = (wide - narrow) / max(abs(narrow), 1e-300)
    if growth > 0.05:
        warnings.warn(f"lambda0 proxy grows by {growth:.1%} when the quantile window widens", RuntimeWarning)
    return {"narrow": float(narrow), "wide": float(wide), "growth": float(growth)}
