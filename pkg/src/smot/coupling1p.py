"""One-period supermartingale couplings between two marginals.

The decreasing coupling sends mass below the phase point ``x1`` down by the
quantile map and builds a right-curtain martingale coupling above it, with
supporting maps ``T_d <= id <= T_u`` and identity on ``[m_upper, r_mu)``.
The increasing variant (uniform family only) is the mirror construction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import (DomainError, MonotonicityViolation, NoTransition, OrderViolation,
                     RootBracketError, ValidationError, DispersionWarning)
from .marginals import Measure, MarginalFamily, UniformFamily
from .numerics import XTOL, bracket_roots, brent_root

# Upper quantile used as the search ceiling for T_u on unbounded supports.
TAIL_U = 1.0 - 1e-10


def _finite_lo(m: Measure) -> float:
    return m.ell if math.isfinite(m.ell) else float(m.quantile(1e-12))


def _finite_hi(m: Measure) -> float:
    return m.r if math.isfinite(m.r) else float(m.quantile(TAIL_U))


# --------------------------------------------------------------------------- pairs


def put_order_gap(mu: Measure, nu: Measure, n_strikes: int = 100) -> tuple[float, float]:
    """Largest violation of P_mu(k) <= P_nu(k) over a strike grid, and its strike."""
    lo = min(float(mu.quantile(1e-3)), float(nu.quantile(1e-3)))
    hi = max(float(mu.quantile(1 - 1e-3)), float(nu.quantile(1 - 1e-3)))
    ks = np.linspace(lo, hi, n_strikes)
    gap = mu.put(ks) - nu.put(ks)
    i = int(np.argmax(gap))
    return float(gap[i]), float(ks[i])


def density_crossings(mu: Measure, nu: Measure, n_grid: int = 4001) -> tuple[float, float, bool]:
    """Lower and upper crossing of f_mu and f_nu, and whether the sign pattern is (-, +, -).

    Crossings are refined by bracketed root search.  At a support endpoint of a
    bounded measure the density jumps, and the refined point is that endpoint.
    """
    lo = min(_finite_lo(mu), _finite_lo(nu))
    hi = max(_finite_hi(mu), _finite_hi(nu))
    xs = np.linspace(lo, hi, n_grid)
    diff = lambda x: np.asarray(mu.pdf(x), float) - np.asarray(nu.pdf(x), float)
    d = diff(xs)
    sign = np.sign(np.where(np.abs(d) < 1e-300, 0.0, d))
    idx = np.nonzero(sign)[0]
    if idx.size == 0:
        raise ValidationError("densities coincide on the whole grid")
    s = sign[idx]
    changes = np.nonzero(np.diff(s))[0]
    pattern = [s[0]] + [s[i + 1] for i in changes]
    dispersed = pattern == [-1, 1, -1]
    pos = idx[s > 0]
    if pos.size == 0:
        raise ValidationError("f_mu never exceeds f_nu: no dispersion band")

    def refine(i_neg, i_pos):
        a, b = xs[min(i_neg, i_pos)], xs[max(i_neg, i_pos)]
        if abs(i_neg - i_pos) != 1:
            # a zero-density gap sits between; the crossing is the edge of positivity
            return xs[i_pos]
        return brent_root(lambda x: float(diff(x)), a, b, xtol=1e-13, what="density crossing")

    first, last = pos[0], pos[-1]
    m_lower = refine(first - 1, first) if first > 0 else float(mu.ell)
    m_upper = refine(last + 1, last) if last < n_grid - 1 else float(mu.r)
    # snap to a bounded support endpoint when the crossing is a density jump
    for end in (mu.ell, mu.r):
        if math.isfinite(end):
            if abs(m_lower - end) < 1e-8:
                m_lower = float(end)
            if abs(m_upper - end) < 1e-8:
                m_upper = float(end)
    return float(m_lower), float(m_upper), dispersed


@dataclass(frozen=True)
class MeasurePair:
    """Two marginals with mu <=_cd nu, plus the density crossings m_lower < m_upper."""

    mu: Measure
    nu: Measure
    m_lower: float
    m_upper: float
    dispersed: bool = True
    uniform: bool = False

    @classmethod
    def build(cls, mu: Measure, nu: Measure, *, check_order: bool = True,
              crossings: tuple[float, float] | None = None, uniform: bool = False) -> "MeasurePair":
        if check_order:
            gap, k = put_order_gap(mu, nu)
            if gap > 1e-9:
                raise OrderViolation(0.0, 1.0, k, gap)
        if crossings is None:
            lo, hi, ok = density_crossings(mu, nu)
        else:
            (lo, hi), ok = crossings, True
        if not ok:
            warnings.warn(f"densities of {mu.label} and {nu.label} do not cross exactly twice",
                          DispersionWarning, stacklevel=2)
        return cls(mu, nu, lo, hi, ok, uniform)


def pair_from_family(family: MarginalFamily, s: float, t: float, *, check_order: bool = True) -> MeasurePair:
    if not t > s:
        raise ValidationError(f"need s < t, got s={s}, t={t}")
    mu, nu = family.at(s), family.at(t)
    crossings = None
    uniform = isinstance(family, UniformFamily)
    if uniform:
        # nu is wider on both sides, so the densities cross at mu's endpoints
        crossings = (mu.ell, mu.r)
    return MeasurePair.build(mu, nu, check_order=check_order, crossings=crossings, uniform=uniform)


# ---------------------------------------------------------------- primitive maps


def quantile_map(mu: Measure, nu: Measure, x):
    """F_nu^{-1}(F_mu(x))."""
    x = np.asarray(x, float)
    if np.any((x < mu.ell) | (x > mu.r)):
        raise DomainError(f"quantile_map: point outside support [{mu.ell}, {mu.r}]")
    return nu.quantile(mu.cdf(x))


def antitone_map(mu: Measure, nu: Measure, x):
    """F_nu^{-1}(nu(R) - F_mu(x))."""
    if abs(mu.mass - nu.mass) > 1e-12:
        raise ValidationError(f"antitone_map: masses differ ({mu.mass} vs {nu.mass})")
    x = np.asarray(x, float)
    return nu.quantile(nu.mass - mu.cdf(x))


def _upper_moments(m: Measure, x):
    return m.partial_moments(x, m.r)


# ------------------------------------------------------------ decreasing coupling


def _phase_residual(pair: MeasurePair, x):
    """Mean residual after matching the upper mass of mu above x with nu above y(x)."""
    mu, nu = pair.mu, pair.nu
    y = nu.quantile(mu.cdf(x))
    _, a1 = _upper_moments(mu, x)
    _, b1 = _upper_moments(nu, y)
    return a1 - b1, y


def compute_phase_point(pair: MeasurePair, *, on_no_transition: str = "ell",
                        xtol: float = XTOL) -> tuple[float, float]:
    """Solve the mass/mean system for (x1, y1).

    For trial x the mass equation gives y(x) = F_nu^{-1}(F_mu(x)); x1 is the root
    of the mean residual on (ell_mu, m_upper).  If the residual is not positive
    at the lower end the pair is martingale throughout, and either
    ``(ell_mu, ell_nu)`` is returned or NoTransition is raised.
    """
    lo = _finite_lo(pair.mu)
    hi = pair.m_upper
    r_lo = float(_phase_residual(pair, lo)[0])
    scale = max(1.0, abs(pair.mu.mean))
    if r_lo <= 1e-12 * scale:
        if on_no_transition == "raise":
            raise NoTransition(f"mean residual {r_lo:.3e} at lower end: no supermartingale region")
        return float(pair.mu.ell), float(pair.nu.ell)
    # The residual also vanishes at r_mu when m_upper = r_mu, so locate the
    # first downward sign change on a probability grid before refining.
    p_lo, p_hi = float(pair.mu.cdf(lo)), float(pair.mu.cdf(hi))
    grid = pair.mu.quantile(np.linspace(p_lo, p_hi, 257))
    grid[0], grid[-1] = lo, hi
    vals = np.asarray(_phase_residual(pair, grid)[0], float)
    neg = np.flatnonzero(vals[1:] < 0)
    if neg.size == 0:
        raise RootBracketError("phase point: mean residual never turns negative", lo, hi,
                               r_lo, float(vals[-1]))
    k = int(neg[0])
    x1 = brent_root(lambda x: float(_phase_residual(pair, x)[0]), float(grid[k]), float(grid[k + 1]),
                    xtol=xtol, what="phase point x1")
    y1 = float(pair.nu.quantile(pair.mu.cdf(x1)))
    return float(x1), y1


def phase_residuals(pair: MeasurePair, x1: float, y1: float) -> tuple[float, float]:
    """Mass and mean residuals of the phase-point system."""
    a0, a1 = _upper_moments(pair.mu, x1)
    b0, b1 = _upper_moments(pair.nu, y1)
    return float(a0 - b0), float(a1 - b1)


@dataclass
class OnePeriodCoupling:
    """Decreasing supermartingale coupling of ``pair.mu`` and ``pair.nu``.

    ``T_u``, ``T_d`` and ``q`` accept arrays.  With ``grid_size`` set, ``T_u`` is
    interpolated from that many exact solves (in probability coordinates) and
    ``T_d`` follows from the mass equation, so the kernel stays exactly
    martingale on the band.
    """

    pair: MeasurePair
    x1: float
    y1: float
    grid_size: int | None = None
    _interp: PchipInterpolator | None = field(default=None, repr=False)
    _p_band: tuple[float, float] = field(default=(0.0, 0.0), repr=False)

    def __post_init__(self):
        mu = self.pair.mu
        self._p_band = (float(mu.cdf(self.x1)), float(mu.cdf(self.pair.m_upper)))
        self._t_hi = _finite_hi(self.pair.nu)
        if self.grid_size:
            self._build_interpolant(int(self.grid_size))

    # -- band equations
    def g(self, x, T):
        """Lower point T_d that matches the mass of mu on (x, T) with nu on (T_d, T)."""
        mu, nu = self.pair.mu, self.pair.nu
        m0, _ = mu.partial_moments(x, T)
        return nu.quantile(np.clip(nu.cdf(T) - m0, 0.0, 1.0))

    def band_residual(self, x, T):
        """Mean residual of the right-curtain equations at trial T_u = T."""
        mu, nu = self.pair.mu, self.pair.nu
        td = self.g(x, T)
        _, a1 = mu.partial_moments(x, T)
        _, b1 = nu.partial_moments(td, T)
        return a1 - b1

    def in_band(self, x):
        x = np.asarray(x, float)
        return (x > self.x1) & (x < self.pair.m_upper)

    def solve_T_u(self, x) -> np.ndarray:
        """Exact T_u on the band by vectorised bracketed root search."""
        x = np.atleast_1d(np.asarray(x, float))
        if np.any(~self.in_band(x)):
            raise DomainError("solve_T_u: points outside the martingale band")
        if self.pair.uniform:
            return self._uniform_T_u(x)
        lo = np.full_like(x, self.pair.m_upper)
        hi = np.full_like(x, self._t_hi)
        f_hi = self.band_residual(x, hi)
        # root above the numerical ceiling: clamp (only within ~1e-10 of tail mass)
        above = f_hi > 0
        out = np.empty_like(x)
        out[above] = hi[above]
        todo = ~above
        if np.any(todo):
            f_lo = self.band_residual(x[todo], lo[todo])
            # at x just below m_upper the residual at the lower end is round-off
            flat = f_lo <= 1e-13 * (1.0 + np.abs(x[todo]))
            bad = f_lo < -1e-13 * (1.0 + np.abs(x[todo]))
            if np.any(bad):
                i = int(np.argmax(bad))
                raise RootBracketError("T_u bracket has no sign change", float(lo[todo][i]), float(hi[todo][i]),
                                       float(f_lo[i]), float(f_hi[todo][i]))
            idx = np.flatnonzero(todo)
            out[idx[flat]] = self.pair.m_upper
            solve = idx[~flat]
            out[solve] = bracket_roots(lambda T, xx: self.band_residual(xx, T), lo[solve], hi[solve],
                                       args=(x[solve],), what="T_u")
        return out

    def _uniform_T_u(self, x):
        # two uniform densities: the mass and mean equations are linear in (T_d, T_u)
        mu, nu = self.pair.mu, self.pair.nu
        width = (mu.r - x) * (nu.r - nu.ell) / (mu.r - mu.ell)
        return np.minimum(0.5 * (mu.r + x + width), nu.r)

    def _build_interpolant(self, n: int) -> None:
        if self.pair.uniform:
            return
        p1, pm = self._p_band
        if pm <= p1:
            return
        # Chebyshev nodes cluster near both ends of the band
        k = np.arange(n)
        nodes = p1 + (pm - p1) * 0.5 * (1 - np.cos(np.pi * (k + 0.5) / n))
        xs = self.pair.mu.quantile(nodes)
        keep = self.in_band(xs)
        nodes, xs = nodes[keep], xs[keep]
        tu = self.solve_T_u(xs)
        vu = self.pair.nu.cdf(tu)
        pts = np.concatenate([[p1], nodes, [pm]])
        vals = np.concatenate([[float(self.pair.nu.cdf(self._t_hi))], vu,
                               [float(self.pair.nu.cdf(self.pair.m_upper))]])
        self._interp = PchipInterpolator(pts, vals)

    # -- supporting maps
    def T_u(self, x):
        """Upper map: +inf at or below x1, the band solution, identity above m_upper."""
        x = np.asarray(x, float)
        out = np.where(x <= self.x1, np.inf, x).astype(float)
        band = self.in_band(x)
        if np.any(band):
            if self._interp is not None:
                p = self.pair.mu.cdf(x[band])
                out[band] = self.pair.nu.quantile(self._interp(p))
            else:
                out[band] = self.solve_T_u(x[band])
        return out

    def T_d(self, x, T_u=None):
        x = np.asarray(x, float)
        out = np.array(x, dtype=float, copy=True)
        low = x <= self.x1
        if np.any(low):
            out[low] = self.pair.nu.quantile(self.pair.mu.cdf(x[low]))
        band = self.in_band(x)
        if np.any(band):
            tu = self.T_u(x[band]) if T_u is None else np.asarray(T_u, float)[band]
            out[band] = np.minimum(self.g(x[band], tu), x[band])
        return out

    def maps(self, x):
        """(T_d, T_u, q) evaluated together."""
        x = np.asarray(x, float)
        tu = self.T_u(x)
        td = self.T_d(x, T_u=tu)
        band = self.in_band(x)
        q = np.zeros_like(x, dtype=float)
        if np.any(band):
            q[band] = (x[band] - td[band]) / (tu[band] - td[band])
        diag = x >= self.pair.m_upper
        if np.any(diag):
            q[diag] = self._q_at_top()
        return td, tu, q

    def _q_at_top(self) -> float:
        x = self.pair.m_upper - 1e-8
        if not x > self.x1:
            return 0.0
        td, tu, q = self.maps(np.array([x]))
        return float(q[0])

    def q(self, x):
        return self.maps(x)[2]

    def sample(self, x, u):
        """Kernel sampler: T_u(x) when u < q(x), else T_d(x); identity at or above m_upper."""
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        td, tu, q = self.maps(x)
        y = np.where(u < q, tu, td)
        return np.where(x >= self.pair.m_upper, x, y)

    def check_monotone(self, n: int = 50) -> None:
        """T_u strictly decreasing and T_d increasing on a band grid."""
        if not self.pair.m_upper > self.x1:
            return
        p1, pm = self._p_band
        xs = self.pair.mu.quantile(np.linspace(p1, pm, n + 2)[1:-1])
        xs = xs[self.in_band(xs)]
        td, tu, _ = self.maps(xs)
        if np.any(np.diff(tu) >= 0) or np.any(np.diff(td) <= 0):
            raise MonotonicityViolation("supporting maps fail strict monotonicity on the band grid")


def build_decreasing_coupling(pair: MeasurePair, *, grid_size: int | None = None,
                              on_no_transition: str = "ell", verify: bool = True) -> OnePeriodCoupling:
    x1, y1 = compute_phase_point(pair, on_no_transition=on_no_transition)
    c = OnePeriodCoupling(pair, x1, y1, grid_size=grid_size)
    if verify:
        c.check_monotone()
    return c


def kernel_sample(c, x, u):
    return c.sample(x, u)


# ------------------------------------------------------------ increasing coupling


def increasing_phase_point_uniform(t: float, eps: float) -> float:
    """Closed-form phase point of the increasing coupling for the uniform family."""
    a, e = math.exp(t), math.exp(eps)
    num = a ** 3 * (1 - e * e) + a * (2 * e + a * (1 + e))
    den = 1 + e + a * (1 + e * e)
    return num / den


def increasing_phase_point(mu: Measure, nu: Measure, *, xtol: float = XTOL) -> tuple[float, float]:
    """Generic increasing phase point: lower mass of mu below x1 matched with upper mass of nu above y1."""

    def residual(x):
        y = nu.quantile(1.0 - mu.cdf(x))
        _, a1 = mu.partial_moments(mu.ell, x)
        _, b1 = nu.partial_moments(y, nu.r)
        return float(a1 - b1)

    lo = _finite_lo(mu) + 1e-12
    hi = _finite_hi(mu) - 1e-12
    x1 = brent_root(residual, lo, hi, xtol=xtol, what="increasing phase point")
    return float(x1), float(nu.quantile(1.0 - mu.cdf(x1)))


@dataclass
class IncreasingUniformCoupling:
    """Increasing supermartingale coupling of mu_t and mu_{t+eps} for the uniform family.

    Martingale (left-curtain) part on (ell_t, x1); antitone downward map on [x1, r_t).
    """

    t: float
    eps: float
    mu: Measure = field(init=False)
    nu: Measure = field(init=False)
    x1: float = field(init=False)
    y1: float = field(init=False)

    def __post_init__(self):
        if not (0 <= self.t and self.eps > 0 and self.t + self.eps <= 1 + 1e-12):
            raise ValidationError(f"need 0 <= t < t+eps <= 1, got t={self.t}, eps={self.eps}")
        fam = UniformFamily()
        self.mu, self.nu = fam.at(self.t), fam.at(self.t + self.eps)
        self.x1 = increasing_phase_point_uniform(self.t, self.eps)
        self.y1 = self.x1 - math.exp(self.t + self.eps) - math.exp(2 * self.t)

    def in_band(self, x):
        x = np.asarray(x, float)
        return x < self.x1

    def T_u(self, x):
        a, e = math.exp(self.t), math.exp(self.eps)
        x = np.asarray(x, float)
        tu = 0.5 * (e * (1 + a * e) * (x + a * a) / (1 + a) + x - a * a)
        return np.where(self.in_band(x), tu, x)

    def T_d(self, x):
        a = math.exp(self.t)
        x = np.asarray(x, float)
        band = x - a * a - self.T_u(x)
        anti = self.nu.quantile(1.0 - self.mu.cdf(x))
        return np.where(self.in_band(x), band, anti)

    def maps(self, x):
        x = np.asarray(x, float)
        tu, td = self.T_u(x), self.T_d(x)
        width = tu - td
        with np.errstate(invalid="ignore", divide="ignore"):
            q = np.where(self.in_band(x) & (width > 0), (x - td) / np.where(width > 0, width, 1.0), 0.0)
        return td, tu, q

    def q(self, x):
        return self.maps(x)[2]

    def sample(self, x, u):
        td, tu, q = self.maps(x)
        return np.where(np.asarray(u) < q, tu, td)


def build_increasing_coupling_uniform(t: float, eps: float, family: MarginalFamily | None = None):
    if family is not None and not isinstance(family, UniformFamily):
        raise ValidationError("the increasing coupling is implemented for the uniform family only "
                              "(unbounded supports degenerate in the limit)")
    return IncreasingUniformCoupling(t, eps)
