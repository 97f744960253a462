"""Time-indexed marginal families t -> mu_t.

Every family exposes the CDF ``F``, density ``f``, their time derivatives,
quantiles, support bounds and truncated moments.  Built-in families carry
closed forms; the tabulated family interpolates a density table.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import integrate as _integrate
from scipy.interpolate import PchipInterpolator
from scipy.special import ndtr, ndtri

from .errors import OrderViolation, ValidationError
from .numerics import U_CLAMP, integrate_1d

ArrayLike = float | np.ndarray

_SQRT2PI = math.sqrt(2.0 * math.pi)


def _phi(z):
    return np.exp(-0.5 * np.square(z)) / _SQRT2PI


def _normal_mass(alpha, beta):
    """P(alpha < Z < beta) for a standard normal, accurate in both tails."""
    alpha, beta = np.broadcast_arrays(np.asarray(alpha, float), np.asarray(beta, float))
    upper = ndtr(-alpha) - ndtr(-beta)
    lower = ndtr(beta) - ndtr(alpha)
    return np.where(alpha > 0, upper, lower)


@dataclass(frozen=True)
class Measure:
    """A finite measure on the line with a density.

    ``moments(a, b)`` returns ``(mass, first moment)`` restricted to ``[a, b]``;
    when absent, moments are computed by quadrature of the density.
    """

    cdf: Callable[[ArrayLike], ArrayLike]
    pdf: Callable[[ArrayLike], ArrayLike]
    quantile: Callable[[ArrayLike], ArrayLike]
    ell: float
    r: float
    mean: float
    mass: float = 1.0
    moments: Callable[[ArrayLike, ArrayLike], tuple] | None = None
    label: str = ""

    def partial_moments(self, a: ArrayLike, b: ArrayLike) -> tuple[np.ndarray, np.ndarray]:
        """Mass and first moment of the measure restricted to [a, b]."""
        a = np.maximum(np.asarray(a, float), self.ell)
        b = np.minimum(np.asarray(b, float), self.r)
        if self.moments is not None:
            m0, m1 = self.moments(a, b)
            empty = b <= a
            return np.where(empty, 0.0, m0), np.where(empty, 0.0, m1)
        a, b = np.broadcast_arrays(a, b)
        m0 = np.zeros(a.shape)
        m1 = np.zeros(a.shape)
        for idx in np.ndindex(a.shape):
            lo, hi = float(a[idx]), float(b[idx])
            if hi <= lo:
                continue
            m0[idx] = integrate_1d(lambda x: float(self.pdf(x)), lo, hi)
            m1[idx] = integrate_1d(lambda x: x * float(self.pdf(x)), lo, hi)
        return m0, m1

    def put(self, k: ArrayLike) -> np.ndarray:
        """Put price  int (k - x)^+ dmu."""
        m0, m1 = self.partial_moments(-np.inf, k)
        return np.asarray(k) * m0 - m1

    def call(self, k: ArrayLike) -> np.ndarray:
        m0, m1 = self.partial_moments(k, np.inf)
        return m1 - np.asarray(k) * m0


class MarginalFamily:
    """Base class; subclasses provide the closed forms or interpolants."""

    name = "family"
    t_min = 0.0
    t_max = 1.0

    # Pointwise functions of (t, x); t scalar, x scalar or array.
    def F(self, t: float, x: ArrayLike) -> np.ndarray:
        raise NotImplementedError

    def f(self, t: float, x: ArrayLike) -> np.ndarray:
        raise NotImplementedError

    def dtF(self, t: float, x: ArrayLike) -> np.ndarray:
        raise NotImplementedError

    def dtf(self, t: float, x: ArrayLike) -> np.ndarray:
        raise NotImplementedError

    def quantile(self, t: float, u: ArrayLike) -> np.ndarray:
        raise NotImplementedError

    def ell(self, t: float) -> float:
        raise NotImplementedError

    def r(self, t: float) -> float:
        raise NotImplementedError

    def mean(self, t: float) -> float:
        return float(self.moments(t, self.ell(t), self.r(t))[1])

    def moments(self, t: float, a: ArrayLike, b: ArrayLike) -> tuple[np.ndarray, np.ndarray]:
        return self.at(t).partial_moments(a, b)

    def dtF_integral(self, t: float, a, b):
        """int_a^b dtF(t, xi) dxi (a <= b elementwise)."""
        a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
        out = np.zeros(a.shape)
        for idx in np.ndindex(a.shape):
            lo, hi = max(a[idx], self.ell(t)), min(b[idx], self.r(t))
            if hi > lo:
                out[idx] = integrate_1d(lambda x: float(self.dtF(t, x)), lo, hi, what="int dtF")
        return out if out.ndim else float(out)

    def _moment_fn(self, t: float):
        return None

    def at(self, t: float) -> Measure:
        self.check_time(t)
        return Measure(
            cdf=lambda x, t=t: self.F(t, x),
            pdf=lambda x, t=t: self.f(t, x),
            quantile=lambda u, t=t: self.quantile(t, u),
            ell=self.ell(t),
            r=self.r(t),
            mean=self._mean_value(t),
            moments=self._moment_fn(t),
            label=f"{self.name}@{t:.6g}",
        )

    def _mean_value(self, t: float) -> float:
        return self.mean(t)

    def check_time(self, t: float) -> None:
        if not (self.t_min - 1e-12 <= t <= self.t_max + 1e-12):
            raise ValidationError(f"{self.name}: time {t} outside [{self.t_min}, {self.t_max}]")

    def quantile_grid(self, t: float, probs: Sequence[float]) -> np.ndarray:
        return self.quantile(t, np.asarray(probs, float))


def _clamp_u(u: ArrayLike) -> np.ndarray:
    return np.clip(np.asarray(u, float), U_CLAMP, 1.0 - U_CLAMP)


class UniformFamily(MarginalFamily):
    """mu_t uniform on [-e^{2t}, e^t]."""

    name = "uniform"
    t_min = 0.0

    @staticmethod
    def _a(t):
        return math.exp(t)

    def ell(self, t):
        return -math.exp(2 * t)

    def r(self, t):
        return math.exp(t)

    def width(self, t):
        a = math.exp(t)
        return a + a * a

    def F(self, t, x):
        a = math.exp(t)
        return np.clip((np.asarray(x, float) + a * a) / (a + a * a), 0.0, 1.0)

    def f(self, t, x):
        a = math.exp(t)
        x = np.asarray(x, float)
        return np.where((x >= -a * a) & (x <= a), 1.0 / (a + a * a), 0.0)

    def dtF(self, t, x):
        a = math.exp(t)
        s = a + a * a
        x = np.asarray(x, float)
        val = (2 * a * a * s - (x + a * a) * (a + 2 * a * a)) / (s * s)
        return np.where((x > -a * a) & (x < a), val, 0.0)

    def dtf(self, t, x):
        a = math.exp(t)
        s = a + a * a
        x = np.asarray(x, float)
        return np.where((x > -a * a) & (x < a), -(a + 2 * a * a) / (s * s), 0.0)

    def quantile(self, t, u):
        a = math.exp(t)
        return -a * a + np.clip(np.asarray(u, float), 0.0, 1.0) * (a + a * a)

    def mean(self, t):
        a = math.exp(t)
        return 0.5 * (a - a * a)

    def _moment_fn(self, t):
        a = math.exp(t)
        s = a + a * a

        def moments(lo, hi):
            lo = np.clip(lo, -a * a, a)
            hi = np.clip(hi, -a * a, a)
            return (hi - lo) / s, (hi * hi - lo * lo) / (2 * s)

        return moments

    def dtF_integral(self, t, lo, hi):
        a = math.exp(t)
        s = a + a * a
        lo = np.clip(np.asarray(lo, float), -a * a, a)
        hi = np.clip(np.asarray(hi, float), -a * a, a)
        hi = np.maximum(hi, lo)
        # antiderivative of the affine dtF
        c0 = (2 * a * a * s - a * a * (a + 2 * a * a)) / (s * s)
        c1 = -(a + 2 * a * a) / (s * s)
        return c0 * (hi - lo) + 0.5 * c1 * (hi * hi - lo * lo)


class _GaussianTimeFamily(MarginalFamily):
    def __init__(self, delta: float = 0.05):
        delta = float(delta)
        if not (0.0 < delta < 1.0):
            raise ValidationError(f"{self.name}: delta must lie in (0, 1), got {delta}")
        self.delta = delta
        self.t_min = delta

    def __repr__(self):
        return f"{type(self).__name__}(delta={self.delta})"


class BachelierFamily(_GaussianTimeFamily):
    """mu_t = Normal(-t, t) on t in [delta, 1]."""

    name = "bachelier"

    def ell(self, t):
        return -math.inf

    def r(self, t):
        return math.inf

    def _z(self, t, x):
        return (np.asarray(x, float) + t) / math.sqrt(t)

    def F(self, t, x):
        return ndtr(self._z(t, x))

    def f(self, t, x):
        return _phi(self._z(t, x)) / math.sqrt(t)

    def dtF(self, t, x):
        x = np.asarray(x, float)
        return _phi(self._z(t, x)) * (t - x) / (2.0 * t ** 1.5)

    def dtf(self, t, x):
        x = np.asarray(x, float)
        z = self._z(t, x)
        return _phi(z) / (2.0 * t ** 1.5) * (-z * (t - x) / math.sqrt(t) - 1.0)

    def quantile(self, t, u):
        return math.sqrt(t) * ndtri(_clamp_u(u)) - t

    def mean(self, t):
        return -t

    def _moment_fn(self, t):
        s = math.sqrt(t)

        def moments(lo, hi):
            alpha, beta = (lo + t) / s, (hi + t) / s
            m0 = _normal_mass(alpha, beta)
            m1 = -t * m0 - s * (_phi(beta) - _phi(alpha))
            return m0, m1

        return moments

    def dtF_integral(self, t, lo, hi):
        s = math.sqrt(t)
        za = (np.asarray(lo, float) + t) / s
        zb = (np.asarray(hi, float) + t) / s
        return (2 * t * _normal_mass(za, zb) + s * (_phi(zb) - _phi(za))) / (2 * t)


class GBMFamily(_GaussianTimeFamily):
    """mu_t = LogNormal with log-mean -t and log-variance t, t in [delta, 1]."""

    name = "gbm"

    def ell(self, t):
        return 0.0

    def r(self, t):
        return math.inf

    @staticmethod
    def _log(x):
        x = np.asarray(x, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(x > 0, np.log(np.where(x > 0, x, 1.0)), -np.inf)

    def F(self, t, x):
        return ndtr((self._log(x) + t) / math.sqrt(t))

    def f(self, t, x):
        x = np.asarray(x, float)
        z = (self._log(x) + t) / math.sqrt(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = _phi(z) / (np.where(x > 0, x, 1.0) * math.sqrt(t))
        return np.where(x > 0, val, 0.0)

    def dtF(self, t, x):
        lx = self._log(x)
        z = (lx + t) / math.sqrt(t)
        with np.errstate(invalid="ignore"):
            val = _phi(z) * (t - lx) / (2.0 * t ** 1.5)
        return np.where(np.asarray(x) > 0, val, 0.0)

    def dtf(self, t, x):
        x = np.asarray(x, float)
        lx = self._log(x)
        z = (lx + t) / math.sqrt(t)
        with np.errstate(invalid="ignore", divide="ignore"):
            val = _phi(z) / (2.0 * t ** 1.5 * np.where(x > 0, x, 1.0)) * (
                -z * (t - lx) / math.sqrt(t) - 1.0)
        return np.where(x > 0, val, 0.0)

    def quantile(self, t, u):
        return np.exp(math.sqrt(t) * ndtri(_clamp_u(u)) - t)

    def mean(self, t):
        return math.exp(-0.5 * t)

    def _moment_fn(self, t):
        s = math.sqrt(t)
        scale = math.exp(-0.5 * t)

        def moments(lo, hi):
            alpha = (self._log(lo) + t) / s
            beta = (self._log(hi) + t) / s
            m0 = _normal_mass(alpha, beta)
            m1 = scale * _normal_mass(alpha - s, beta - s)
            return m0, m1

        return moments

    def dtF_integral(self, t, lo, hi):
        s = math.sqrt(t)
        wa = self._log(np.maximum(np.asarray(lo, float), 0.0)) / s
        hi = np.asarray(hi, float)
        with np.errstate(invalid="ignore"):
            wb = np.where(np.isinf(hi), np.inf, self._log(np.where(np.isinf(hi), 1.0, hi)) / s)
        ea = np.where(np.isinf(wa), 0.0, _phi(np.where(np.isinf(wa), 0.0, wa)))
        eb = np.where(np.isinf(wb), 0.0, _phi(np.where(np.isinf(wb), 0.0, wb)))
        return math.exp(-0.5 * t) / (2 * t) * (t * _normal_mass(wa, wb) + s * (eb - ea))


@dataclass
class _Slice:
    t: float
    x: np.ndarray
    dens: np.ndarray
    cum: np.ndarray
    cdf: PchipInterpolator = field(repr=False)


class TabulatedFamily(MarginalFamily):
    """Family given by density samples on per-time x-grids.

    F is the cumulative trapezoid of the samples (normalised to unit mass),
    interpolated monotonically in x and linearly in t.  Time derivatives are
    centred differences in t.
    """

    name = "tabulated"

    def __init__(self, slices: Sequence[tuple[float, np.ndarray, np.ndarray]], *,
                 check_order: bool = True, n_strikes: int = 50):
        if len(slices) < 2:
            raise ValidationError("tabulated family needs at least two time slices")
        times = [float(s[0]) for s in slices]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValidationError("tabulated time grid must be strictly increasing")
        self._slices: list[_Slice] = []
        for t, xs, fs in slices:
            xs = np.asarray(xs, float)
            fs = np.asarray(fs, float)
            if xs.ndim != 1 or xs.size < 3 or xs.shape != fs.shape:
                raise ValidationError(f"slice t={t}: need matching x and f arrays of length >= 3")
            if np.any(np.diff(xs) <= 0):
                raise ValidationError(f"slice t={t}: x grid must be strictly increasing")
            if np.any(fs < 0) or not np.all(np.isfinite(fs)):
                raise ValidationError(f"slice t={t}: density samples must be finite and >= 0")
            if np.any(fs[1:-1] <= 0):
                raise ValidationError(f"slice t={t}: density must be strictly positive inside its support")
            cum = _integrate.cumulative_trapezoid(fs, xs, initial=0.0)
            total = cum[-1]
            if total <= 0:
                raise ValidationError(f"slice t={t}: zero total mass")
            self._slices.append(_Slice(float(t), xs, fs / total, cum / total,
                                       PchipInterpolator(xs, cum / total, extrapolate=False)))
        self.times = np.array(times)
        self.t_min = float(self.times[0])
        self.t_max = float(self.times[-1])
        self._h = 0.5 * float(np.min(np.diff(self.times)))
        if check_order:
            check_cd_order(self, self.times, n_strikes=n_strikes)

    @classmethod
    def from_csv(cls, path: str | Path, **kwargs) -> "TabulatedFamily":
        rows: dict[float, list[tuple[float, float]]] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != ["t", "x", "f"]:
                raise ValidationError(f"{path}: expected header 't,x,f'")
            for line in reader:
                t, x, f = float(line["t"]), float(line["x"]), float(line["f"])
                rows.setdefault(t, []).append((x, f))
        slices = []
        for t in sorted(rows):
            pts = sorted(rows[t])
            slices.append((t, np.array([p[0] for p in pts]), np.array([p[1] for p in pts])))
        return cls(slices, **kwargs)

    def _locate(self, t: float) -> tuple[int, float]:
        self.check_time(t)
        j = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2))
        w = (t - self.times[j]) / (self.times[j + 1] - self.times[j])
        return j, float(np.clip(w, 0.0, 1.0))

    def _slice_cdf(self, j: int, x: np.ndarray) -> np.ndarray:
        s = self._slices[j]
        val = s.cdf(np.clip(x, s.x[0], s.x[-1]))
        return np.where(x <= s.x[0], 0.0, np.where(x >= s.x[-1], 1.0, val))

    def _slice_pdf(self, j: int, x: np.ndarray) -> np.ndarray:
        s = self._slices[j]
        return np.interp(x, s.x, s.dens, left=0.0, right=0.0)

    def F(self, t, x):
        x = np.asarray(x, float)
        j, w = self._locate(t)
        return (1 - w) * self._slice_cdf(j, x) + w * self._slice_cdf(j + 1, x)

    def f(self, t, x):
        x = np.asarray(x, float)
        j, w = self._locate(t)
        return (1 - w) * self._slice_pdf(j, x) + w * self._slice_pdf(j + 1, x)

    def _centred(self, fn, t, x):
        lo = max(self.t_min, t - self._h)
        hi = min(self.t_max, t + self._h)
        return (fn(hi, x) - fn(lo, x)) / (hi - lo)

    def dtF(self, t, x):
        return self._centred(self.F, t, x)

    def dtf(self, t, x):
        return self._centred(self.f, t, x)

    def ell(self, t):
        j, w = self._locate(t)
        return float(min(self._slices[j].x[0], self._slices[j + 1].x[0]) if 0 < w < 1
                     else self._slices[j + (w >= 1)].x[0])

    def r(self, t):
        j, w = self._locate(t)
        return float(max(self._slices[j].x[-1], self._slices[j + 1].x[-1]) if 0 < w < 1
                     else self._slices[j + (w >= 1)].x[-1])

    def _grid(self, t: float, n: int = 4001) -> np.ndarray:
        j, _ = self._locate(t)
        pts = np.concatenate([self._slices[j].x, self._slices[j + 1].x,
                              np.linspace(self.ell(t), self.r(t), n)])
        return np.unique(pts)

    def quantile(self, t, u):
        xs = self._grid(t)
        cdf = self.F(t, xs)
        keep = np.concatenate([[True], np.diff(cdf) > 0])
        return np.interp(np.clip(np.asarray(u, float), 0.0, 1.0), cdf[keep], xs[keep])

    def _moment_fn(self, t):
        xs = self._grid(t)
        dens = self.f(t, xs)
        c0 = _integrate.cumulative_trapezoid(dens, xs, initial=0.0)
        c1 = _integrate.cumulative_trapezoid(xs * dens, xs, initial=0.0)
        norm = c0[-1]

        def moments(lo, hi):
            lo = np.clip(lo, xs[0], xs[-1])
            hi = np.clip(hi, xs[0], xs[-1])
            m0 = np.interp(hi, xs, c0) - np.interp(lo, xs, c0)
            m1 = np.interp(hi, xs, c1) - np.interp(lo, xs, c1)
            return m0 / norm, m1 / norm

        return moments

    def mean(self, t):
        return float(self._moment_fn(t)(self.ell(t), self.r(t))[1])

    def dtF_integral(self, t, lo, hi):
        xs = self._grid(t)
        cum = _integrate.cumulative_trapezoid(self.dtF(t, xs), xs, initial=0.0)
        lo = np.clip(np.asarray(lo, float), xs[0], xs[-1])
        hi = np.clip(np.asarray(hi, float), xs[0], xs[-1])
        return np.interp(hi, xs, cum) - np.interp(lo, xs, cum)


def check_cd_order(family: MarginalFamily, times: Sequence[float], *, n_strikes: int = 50,
                   tol: float = 1e-9) -> None:
    """Put prices must be nondecreasing in t at every strike (convex-decreasing order)."""
    times = list(times)
    for s, t in zip(times, times[1:]):
        ks = np.linspace(float(family.quantile(s, 1e-3)), float(family.quantile(s, 1 - 1e-3)), n_strikes)
        p_s = family.at(s).put(ks)
        p_t = family.at(t).put(ks)
        gap = p_s - p_t
        worst = int(np.argmax(gap))
        if gap[worst] > tol:
            raise OrderViolation(s, t, float(ks[worst]), float(gap[worst]))


def make_uniform_family() -> UniformFamily:
    return UniformFamily()


def make_bachelier_family(delta: float = 0.05) -> BachelierFamily:
    return BachelierFamily(delta)


def make_gbm_family(delta: float = 0.05) -> GBMFamily:
    return GBMFamily(delta)


def make_tabulated_family(grid, **kwargs) -> TabulatedFamily:
    """Build from a CSV path or from a sequence of ``(t, x_grid, densities)``."""
    if isinstance(grid, (str, Path)):
        return TabulatedFamily.from_csv(grid, **kwargs)
    return TabulatedFamily(grid, **kwargs)


def make_family(name: str, delta: float = 0.05, table_path: str | None = None) -> MarginalFamily:
    if name == "uniform":
        return make_uniform_family()
    if name == "bachelier":
        return make_bachelier_family(delta)
    if name == "gbm":
        return make_gbm_family(delta)
    if name == "tabulated":
        if not table_path:
            raise ValidationError("family 'tabulated' needs table_path")
        return make_tabulated_family(table_path)
    raise ValidationError(f"unknown family {name!r}")
