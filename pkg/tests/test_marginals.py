import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from smot.errors import OrderViolation, ValidationError
from smot.marginals import (check_cd_order, make_bachelier_family, make_family, make_gbm_family,
                            make_tabulated_family, make_uniform_family)

FAMILIES = {
    "uniform": make_uniform_family(),
    "bachelier": make_bachelier_family(0.05),
    "gbm": make_gbm_family(0.05),
}


def _grid_times(fam, n=21):
    return np.linspace(fam.t_min, fam.t_max, n)


# --- uniform ---------------------------------------------------------------------


def test_uniform_cdf_at_midpoint():
    assert make_uniform_family().F(0.0, 0.0) == pytest.approx(0.5, abs=1e-15)


def test_uniform_mean_at_one_matches_quadrature():
    fam = make_uniform_family()
    numeric, _ = integrate.quad(lambda x: x * fam.f(1.0, x), -math.e ** 2, math.e, epsabs=1e-12)
    assert fam.mean(1.0) == pytest.approx((math.e - math.e ** 2) / 2, abs=1e-12)
    assert numeric == pytest.approx(fam.mean(1.0), abs=1e-9)
    assert fam.mean(1.0) == pytest.approx(-2.3354, abs=1e-4)


def test_uniform_density_at_zero():
    x = np.linspace(-0.99, 0.99, 17)
    np.testing.assert_allclose(make_uniform_family().f(0.0, x), 0.5, atol=1e-15)


# --- bachelier -------------------------------------------------------------------


@pytest.mark.parametrize("t", [0.05, 0.3, 0.77, 1.0])
def test_bachelier_median(t):
    assert make_bachelier_family().F(t, -t) == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("t", [0.1, 0.5, 1.0])
def test_bachelier_mean(t):
    assert make_bachelier_family().mean(t) == pytest.approx(-t, abs=1e-12)


def test_bachelier_dtF_matches_finite_difference():
    fam = make_bachelier_family()
    h = 1e-5
    F = lambda t, x: stats.norm.cdf((x + t) / math.sqrt(t))
    fd = (F(1 + h, -1.0) - F(1 - h, -1.0)) / (2 * h)
    assert fam.dtF(1.0, -1.0) == pytest.approx(fd, abs=1e-6)


def test_bachelier_rejects_nonpositive_delta():
    with pytest.raises(ValidationError):
        make_bachelier_family(0.0)
    with pytest.raises(ValidationError):
        make_gbm_family(-0.1)


# --- gbm -------------------------------------------------------------------------


@pytest.mark.parametrize("t", [0.05, 0.5, 1.0])
def test_gbm_mean(t):
    fam = make_gbm_family()
    numeric, _ = integrate.quad(lambda x: x * fam.f(t, x), 0, np.inf, epsabs=1e-12, limit=200)
    assert fam.mean(t) == pytest.approx(math.exp(-t / 2), abs=1e-12)
    assert numeric == pytest.approx(math.exp(-t / 2), abs=1e-8)


@pytest.mark.parametrize("t", [0.2, 0.9])
def test_gbm_median_and_quantile(t):
    fam = make_gbm_family()
    assert fam.F(t, math.exp(-t)) == pytest.approx(0.5, abs=1e-15)
    assert fam.quantile(t, stats.norm.cdf(1.0)) == pytest.approx(math.exp(math.sqrt(t) - t), rel=1e-12)


def test_gbm_density_vanishes_off_support():
    fam = make_gbm_family()
    assert np.all(fam.f(0.5, np.array([-1.0, 0.0])) == 0)


# --- tabulated -------------------------------------------------------------------


def _uniform_slices(n_t=200, n_x=200):
    out = []
    for t in np.linspace(0, 1, n_t):
        a = math.exp(t)
        xs = np.linspace(-a * a, a, n_x)
        out.append((t, xs, np.full(n_x, 1 / (a + a * a))))
    return out


def test_tabulated_uniform_matches_closed_form():
    tab = make_tabulated_family(_uniform_slices(), check_order=False)
    ref = make_uniform_family()
    err = 0.0
    for t in tab.times[::7]:
        x = np.linspace(-math.exp(2 * t), math.exp(t), 301)
        err = max(err, float(np.max(np.abs(tab.F(t, x) - ref.F(t, x)))))
    assert err < 1e-3


def test_tabulated_between_slices_is_a_mixture():
    tab = make_tabulated_family(_uniform_slices(), check_order=False)
    t0, t1 = tab.times[40], tab.times[41]
    x = np.linspace(-3, 2, 50)
    mid = 0.5 * (t0 + t1)
    np.testing.assert_allclose(tab.F(mid, x), 0.5 * (tab.F(t0, x) + tab.F(t1, x)), atol=1e-14)


def test_tabulated_from_csv_roundtrip(tmp_path):
    path = tmp_path / "table.csv"
    with open(path, "w") as fh:
        fh.write("t,x,f\n")
        for t, xs, fs in _uniform_slices(5, 50):
            for x, f in zip(xs, fs):
                fh.write(f"{float(t)!r},{float(x)!r},{float(f)!r}\n")
    fam = make_family("tabulated", table_path=str(path))
    assert fam.F(0.5, fam.quantile(0.5, 0.3)) == pytest.approx(0.3, abs=1e-6)


def test_tabulated_needs_two_slices():
    with pytest.raises(ValidationError):
        make_tabulated_family(_uniform_slices()[:1])


def test_tabulated_rejects_negative_density():
    bad = _uniform_slices(3, 20)
    t, xs, fs = bad[1]
    fs = fs.copy()
    fs[5] = -0.1
    bad[1] = (t, xs, fs)
    with pytest.raises(ValidationError):
        make_tabulated_family(bad)


def test_tabulated_order_violation_reports_strike():
    slices = [(0.0, np.linspace(-3, 3, 100), stats.norm.pdf(np.linspace(-3, 3, 100), scale=1.0)),
              (1.0, np.linspace(-3, 3, 100), stats.norm.pdf(np.linspace(-3, 3, 100), scale=0.5))]
    with pytest.raises(OrderViolation) as info:
        make_tabulated_family(slices)
    assert info.value.s == 0.0 and info.value.t == 1.0 and math.isfinite(info.value.strike)


# --- invariants ------------------------------------------------------------------


@pytest.mark.parametrize("name", list(FAMILIES))
def test_quantile_roundtrip(name):
    fam = FAMILIES[name]
    p = np.arange(1, 100) / 100
    for t in _grid_times(fam):
        x = fam.quantile(t, p)
        np.testing.assert_allclose(fam.quantile(t, fam.F(t, x)), x, atol=1e-8)


@pytest.mark.parametrize("name", list(FAMILIES))
def test_put_prices_increase_in_time(name):
    check_cd_order(FAMILIES[name], _grid_times(FAMILIES[name]), n_strikes=50)


@pytest.mark.parametrize("name", list(FAMILIES))
def test_mean_nonincreasing(name):
    fam = FAMILIES[name]
    means = [fam.mean(t) for t in _grid_times(fam)]
    assert np.all(np.diff(means) <= 1e-14)


@pytest.mark.parametrize("name", list(FAMILIES))
def test_dtF_matches_finite_difference(name):
    fam = FAMILIES[name]
    h = 1e-5
    worst = 0.0
    for t in np.linspace(fam.t_min + 2 * h, fam.t_max - 2 * h, 9):
        x = fam.quantile(t, np.linspace(0.01, 0.99, 25))
        fd = (fam.F(t + h, x) - fam.F(t - h, x)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(fam.dtF(t, x) - fd))))
    assert worst < 1e-5


@pytest.mark.parametrize("name", list(FAMILIES))
def test_ell_nonincreasing(name):
    fam = FAMILIES[name]
    ells = np.array([fam.ell(t) for t in _grid_times(fam)])
    assert np.all(ells[1:] <= ells[:-1])


@pytest.mark.parametrize("name", list(FAMILIES))
def test_measure_mean_matches_quadrature(name):
    fam = FAMILIES[name]
    m = fam.at(0.6)
    lo, hi = m.quantile(1e-14), m.quantile(1 - 1e-14)
    numeric, _ = integrate.quad(lambda x: x * m.pdf(x), lo, hi, epsabs=1e-12, limit=200)
    assert numeric == pytest.approx(m.mean, abs=1e-8)


@given(name=st.sampled_from(list(FAMILIES)), s=st.floats(0, 1), u=st.floats(0.001, 0.999))
def test_cdf_quantile_inverse_property(name, s, u):
    fam = FAMILIES[name]
    t = fam.t_min + s * (fam.t_max - fam.t_min)
    assert float(fam.F(t, fam.quantile(t, u))) == pytest.approx(u, abs=1e-10)


@given(name=st.sampled_from(list(FAMILIES)), s=st.floats(0, 1),
       a=st.floats(0.001, 0.999), b=st.floats(0.001, 0.999))
def test_cdf_monotone_property(name, s, a, b):
    fam = FAMILIES[name]
    t = fam.t_min + s * (fam.t_max - fam.t_min)
    xa, xb = fam.quantile(t, min(a, b)), fam.quantile(t, max(a, b))
    assert fam.F(t, xa) <= fam.F(t, xb)
    assert fam.f(t, xa) >= 0


@given(name=st.sampled_from(list(FAMILIES)), s=st.floats(0, 0.95), d=st.floats(0.01, 0.5),
       k=st.floats(0.01, 0.99))
def test_put_monotone_property(name, s, d, k):
    fam = FAMILIES[name]
    t0 = fam.t_min + s * (fam.t_max - fam.t_min)
    t1 = min(fam.t_max, t0 + d)
    strike = float(fam.quantile(t0, k))
    assert fam.at(t0).put(strike) <= fam.at(t1).put(strike) + 1e-12
