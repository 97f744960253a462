import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smot.coupling1p import build_decreasing_coupling, pair_from_family
from smot.curve import ContCharacteristics
from smot.errors import StepOverflow, ValidationError
from smot.marginals import make_bachelier_family, make_uniform_family
from smot.simulate import (JumpPath, Partition, PathEnsemble, conditional_drift, jump_summary, path_statistics,
                           run_discrete_chain, run_increasing_uniform, run_sde, time_grid)

UNIFORM = make_uniform_family()
BACHELIER = make_bachelier_family()
UNIFORM_CHARS = ContCharacteristics(UNIFORM)
BACHELIER_CHARS = ContCharacteristics(BACHELIER)
TIMES = (0.25, 0.5, 1.0)


@pytest.fixture(scope="module")
def uniform_sde():
    return run_sde(UNIFORM_CHARS, 2e-3, 20000, 11, snapshot_times=TIMES, dense=True)


@pytest.fixture(scope="module")
def bachelier_sde():
    return run_sde(BACHELIER_CHARS, 1e-2, 20000, 3, snapshot_times=TIMES, dense=True)


# --- partition and grid ------------------------------------------------------------


def test_partition_validation():
    with pytest.raises(ValidationError):
        Partition(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(ValidationError):
        Partition.uniform(0.0, 0)
    assert Partition.uniform(0.0, 4).mesh == pytest.approx(0.25)


@pytest.mark.parametrize("dt", [0.0, -1e-3, 0.2])
def test_time_grid_rejects_bad_dt(dt):
    with pytest.raises(ValidationError):
        time_grid(0.0, dt)


def test_time_grid_ends_at_one():
    g = time_grid(0.05, 0.07)
    assert g[0] == 0.05 and g[-1] == 1.0 and np.all(np.diff(g) <= 0.07 + 1e-15)


# --- reproducibility ---------------------------------------------------------------


def _same(a: PathEnsemble, b: PathEnsemble):
    np.testing.assert_array_equal(a.x0, b.x0)
    np.testing.assert_array_equal(a.event_path, b.event_path)
    np.testing.assert_array_equal(a.event_time, b.event_time)
    np.testing.assert_array_equal(a.event_post, b.event_post)
    for t in a.snapshots:
        np.testing.assert_array_equal(a.snapshots[t], b.snapshots[t])


def test_sde_reproducible_and_thread_independent():
    kw = dict(snapshot_times=TIMES)
    a = run_sde(UNIFORM_CHARS, 1e-2, 20000, 5, **kw)
    _same(a, run_sde(UNIFORM_CHARS, 1e-2, 20000, 5, **kw))
    _same(a, run_sde(UNIFORM_CHARS, 1e-2, 20000, 5, threads=3, **kw))
    c = run_sde(UNIFORM_CHARS, 1e-2, 20000, 6, **kw)
    assert not np.array_equal(a.snapshots[1.0], c.snapshots[1.0])


def test_chain_and_increasing_reproducible():
    part = Partition.uniform(0.0, 4)
    _same(run_discrete_chain(UNIFORM, part, 9000, 2), run_discrete_chain(UNIFORM, part, 9000, 2, threads=2))
    _same(run_increasing_uniform(1e-2, 9000, 2), run_increasing_uniform(1e-2, 9000, 2, threads=2))


def test_rejects_empty_ensembles():
    with pytest.raises(ValidationError):
        run_sde(UNIFORM_CHARS, 1e-2, 0, 0)
    with pytest.raises(ValidationError):
        run_discrete_chain(UNIFORM, Partition.uniform(0, 2), 0, 0)
    with pytest.raises(ValidationError):
        run_increasing_uniform(1e-2, 0, 0)


# --- discrete chain ----------------------------------------------------------------


def test_single_period_chain_matches_marginal():
    t1 = math.log(2)
    ens = run_discrete_chain(UNIFORM, Partition.uniform(0.0, 1, t_max=t1), 10 ** 6, 1, snapshot_times=[t1])
    (row,) = path_statistics(ens, UNIFORM, [t1])
    assert row.ks < 2e-3


def test_degenerate_partition_is_one_coupling():
    ens = run_discrete_chain(BACHELIER, Partition(np.array([0.3, 1.0])), 5000, 4, snapshot_times=[0.3, 1.0])
    c = build_decreasing_coupling(pair_from_family(BACHELIER, 0.3, 1.0))
    x, y = ens.values_at(0.3), ens.values_at(1.0)
    td, tu = c.T_d(x), c.T_u(x)
    hit = np.isclose(y, td, rtol=1e-6, atol=1e-6) | np.isclose(y, tu, rtol=1e-6, atol=1e-6)
    assert hit.all()
    # the martingale part of the kernel: among band starts, upward jumps happen with probability q
    band = (x > c.x1) & (x < c.pair.m_upper)
    ups = np.isclose(y[band], tu[band], rtol=1e-6) & (tu[band] > x[band] + 1e-9)
    q = c.q(x[band])
    assert abs(ups.mean() - q.mean()) < 4 * math.sqrt(q.mean() / band.sum())


def test_chain_means_match_marginals():
    part = Partition.uniform(0.0, 8)
    ens = run_discrete_chain(UNIFORM, part, 20000, 7, snapshot_times=part.times)
    for row in path_statistics(ens, UNIFORM, part.times):
        assert abs(row.mean - UNIFORM.mean(row.t)) < 3 * row.se


def test_chain_paths_are_piecewise_constant():
    part = Partition.uniform(0.0, 4)
    ens = run_discrete_chain(UNIFORM, part, 500, 1)
    for p in ens.paths[:50]:
        prev = p.t0_value
        for t, pre, post in p.events:
            assert pre == prev and t in part.times
            prev = post


# --- SDE -----------------------------------------------------------------------------


def test_uniform_sde_marginals(uniform_sde):
    for row in path_statistics(uniform_sde, UNIFORM, TIMES):
        # 20000 paths: the KS noise floor is about 1.36 / sqrt(n) = 1e-2
        assert row.ks < 1.2e-2
        assert abs(row.mean - UNIFORM.mean(row.t)) < 3 * row.se


def test_paths_below_x1_drift_down_deterministically(uniform_sde):
    low = np.flatnonzero(uniform_sde.x0 < -0.6)
    assert low.size > 100
    assert np.all(uniform_sde.jump_counts()[low] == 0)
    vals = uniform_sde.values[low]
    assert np.all(np.diff(vals, axis=1) < 0)
    assert np.all(uniform_sde.drift[low] < 0)


def test_paths_above_m_are_frozen(bachelier_sde):
    # m_t increases for this family, so a path above m_{0.1} stays put at least until t = 0.1
    e = bachelier_sde
    top = np.flatnonzero(e.x0 > BACHELIER_CHARS.m_curve(0.1))
    assert top.size > 100
    early = e.grid <= 0.1
    np.testing.assert_array_equal(e.values[np.ix_(top, early)], e.values[top, :1] * np.ones(early.sum()))
    first_jump = {}
    for pid, t in zip(e.event_path, e.event_time):
        first_jump.setdefault(pid, t)
    assert all(first_jump.get(i, 2.0) > 0.1 for i in top)


def test_sde_jumps_go_up_to_T_u(bachelier_sde):
    e = bachelier_sde
    assert np.all(e.event_post > e.event_pre)
    k = np.searchsorted(e.grid, e.event_time[:200] - 1e-12) - 1
    for kk, pre, post in zip(k, e.event_pre[:200], e.event_post[:200]):
        assert post == pytest.approx(float(BACHELIER_CHARS.Tu(e.grid[kk], np.array([pre]))[0]), rel=1e-12)


def test_bachelier_mean(bachelier_sde):
    for row in path_statistics(bachelier_sde, BACHELIER, TIMES):
        assert abs(row.mean + row.t) < 3 * row.se


def test_mean_is_nonincreasing(bachelier_sde):
    for s, t in zip(TIMES[:-1], TIMES[1:]):
        d = bachelier_sde.values_at(t) - bachelier_sde.values_at(s)
        assert d.mean() < 3 * d.std(ddof=1) / math.sqrt(d.size)


def test_binned_supermartingale_drift(uniform_sde):
    pairs = [(s, s + 0.2) for s in np.linspace(0.0, 0.8, 20)]
    worst = -np.inf
    for s, t in pairs:
        _, mean, se, cnt = conditional_drift(uniform_sde, float(s), float(t), n_bins=30)
        ok = cnt > 1
        worst = max(worst, float(np.max(mean[ok] / se[ok])))
    assert worst <= 3.0


def test_step_overflow_is_raised():
    class Violent(ContCharacteristics):
        def coefficients(self, t, x):
            jd, ju, lam = super().coefficients(t, x)
            return jd * 1e6, ju, lam

    with pytest.raises(StepOverflow):
        run_sde(Violent(UNIFORM), 1e-2, 100, 0)


# --- increasing SDE -------------------------------------------------------------------


@pytest.fixture(scope="module")
def increasing():
    return run_increasing_uniform(2e-3, 20000, 3, snapshot_times=TIMES)


def test_increasing_mean(increasing):
    for row in path_statistics(increasing, UNIFORM, TIMES):
        assert abs(row.mean - (math.exp(row.t) - math.exp(2 * row.t)) / 2) < 3 * row.se
        assert row.ks < 1.2e-2


def test_increasing_boundary_landing(increasing):
    e = increasing
    boundary = np.isclose(e.event_pre, np.exp(e.event_time), rtol=0, atol=1e-12)
    assert boundary.sum() > 50
    np.testing.assert_array_equal(e.event_post[boundary], -np.exp(2 * e.event_time[boundary]))


def test_increasing_rejects_other_family():
    with pytest.raises(ValidationError):
        run_increasing_uniform(1e-2, 10, 0, family=BACHELIER)


# --- statistics ------------------------------------------------------------------------


def _constant_ensemble(value=0.5, n=10):
    empty = np.zeros(0)
    return PathEnsemble("const", 0, 0.0, np.full(n, value), empty.astype(int), empty, empty, empty,
                        {0.5: np.full(n, value)})


def test_degenerate_ensemble_statistics():
    (row,) = path_statistics(_constant_ensemble(), UNIFORM, [0.5])
    assert row.var == 0 and row.degenerate and math.isnan(row.ks)
    assert jump_summary(_constant_ensemble()) == {"histogram": [10], "largest_jump": 0.0}


def test_missing_snapshot_raises():
    with pytest.raises(KeyError):
        _constant_ensemble().values_at(0.7)


def test_jump_path_events_array():
    p = JumpPath(0.0, [(0.5, 0.0, 1.0)])
    np.testing.assert_array_equal(p.jumps(), [[0.5, 0.0, 1.0]])
    assert JumpPath(1.0).jumps().shape == (0, 3)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n=st.integers(1, 6))
def test_chain_events_chain_together_property(seed, n):
    part = Partition.uniform(0.0, n)
    ens = run_discrete_chain(UNIFORM, part, 64, seed, snapshot_times=[1.0])
    for p in ens.paths:
        value = p.t0_value
        for _, pre, post in p.events:
            assert pre == value and post <= math.exp(1.0)
            value = post
    finals = np.array([p.events[-1][2] if p.events else p.t0_value for p in ens.paths])
    np.testing.assert_array_equal(finals, ens.values_at(1.0))
