"""Path simulation: the n-period chain of one-period couplings and the limiting jump SDE.

Paths are simulated in blocks of ``BLOCK`` paths.  Each block draws from its
own generator spawned from ``SeedSequence(seed)``, in a fixed order, so an
ensemble depends only on the seed and not on the thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import lambertw

from .coupling1p import build_decreasing_coupling, pair_from_family
from .curve import ContCharacteristics, eval_increasing_chars_uniform
from .errors import StepOverflow, ValidationError
from .marginals import MarginalFamily, UniformFamily
from .numerics import ks_distance

BLOCK = 8192


@dataclass(frozen=True)
class Partition:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, float)
        if t.ndim != 1 or t.size < 2 or np.any(np.diff(t) <= 0):
            raise ValidationError("partition times must be strictly increasing with at least two points")
        object.__setattr__(self, "times", t)

    @property
    def mesh(self) -> float:
        return float(np.max(np.diff(self.times)))

    @classmethod
    def uniform(cls, t_min: float, n: int, t_max: float = 1.0) -> "Partition":
        if n < 1:
            raise ValidationError(f"partition needs n >= 1, got {n}")
        return cls(np.linspace(t_min, t_max, n + 1))


@dataclass
class JumpPath:
    """Piecewise path given by its start value and (time, pre, post) jump events.

    Between events the value follows the drift of the generating scheme; for
    chain paths it is constant.
    """

    t0_value: float
    events: list[tuple[float, float, float]] = field(default_factory=list)

    def jumps(self) -> np.ndarray:
        return np.asarray(self.events, float).reshape(-1, 3)


@dataclass
class PathEnsemble:
    """Simulated paths in columnar form.

    ``event_path/event_time/event_pre/event_post`` list every jump, sorted by
    path then time.  ``snapshots`` maps requested times to value arrays.  When
    dense storage is requested, ``grid`` holds the step times, ``values`` the
    path values at those times, ``drift`` the drift rate used on each step and
    ``pre_end`` the left limit at the end of each step.
    """

    scheme: str
    seed: int
    t0: float
    x0: np.ndarray
    event_path: np.ndarray
    event_time: np.ndarray
    event_pre: np.ndarray
    event_post: np.ndarray
    snapshots: dict[float, np.ndarray]
    grid: np.ndarray | None = None
    values: np.ndarray | None = None
    drift: np.ndarray | None = None
    pre_end: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return int(self.x0.size)

    def path(self, i: int) -> JumpPath:
        sel = self.event_path == i
        ev = list(zip(self.event_time[sel].tolist(), self.event_pre[sel].tolist(), self.event_post[sel].tolist()))
        return JumpPath(float(self.x0[i]), ev)

    @property
    def paths(self) -> list[JumpPath]:
        return [self.path(i) for i in range(self.n_paths)]

    def values_at(self, t: float) -> np.ndarray:
        for key, val in self.snapshots.items():
            if abs(key - t) < 1e-12:
                return val
        if self.values is not None:
            k = int(np.searchsorted(self.grid, t + 1e-12, side="right") - 1)
            return self.values[:, max(k, 0)]
        raise KeyError(f"no snapshot at t={t}; pass it in snapshot_times")

    def jump_counts(self) -> np.ndarray:
        return np.bincount(self.event_path, minlength=self.n_paths)


# ----------------------------------------------------------------------- seeding


def _block_generators(seed: int, n_paths: int, block: int = BLOCK):
    n_blocks = max(1, math.ceil(n_paths / block))
    children = np.random.SeedSequence(seed).spawn(n_blocks)
    sizes = [min(block, n_paths - b * block) for b in range(n_blocks)]
    return [np.random.Generator(np.random.PCG64(c)) for c in children], sizes


def _stratified_uniforms(gen: np.random.Generator, n: int) -> np.ndarray:
    """One uniform per stratum [i/n, (i+1)/n), randomly permuted."""
    return (gen.permutation(n) + gen.random(n)) / n


def _run_blocks(worker, gens, sizes, threads: int):
    """Run ``worker(block_ids)`` over block groups and return per-block results in block order."""
    ids = list(range(len(gens)))
    threads = max(1, min(int(threads or 1), len(ids)))
    if threads == 1:
        return worker(ids)
    groups = [ids[k::threads] for k in range(threads)]
    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(worker, groups))
    out = [None] * len(ids)
    for grp, res in zip(groups, parts):
        for b, r in zip(grp, res):
            out[b] = r
    return out


class _Recorder:
    """Collects events, snapshots and optional dense values for one group of blocks."""

    def __init__(self, n: int, grid: np.ndarray, snap_idx: dict[float, int], dense: bool):
        self.ev: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
        self.snap = {t: np.empty(n) for t in snap_idx}
        self.snap_idx = snap_idx
        self.values = np.empty((n, grid.size)) if dense else None
        self.drift = np.zeros((n, grid.size - 1)) if dense else None
        self.pre_end = np.empty((n, grid.size - 1)) if dense else None

    def end_step(self, k: int, pre: np.ndarray, rate=None):
        """Record the left limit at the end of step k and the drift rate used on it."""
        if self.pre_end is not None:
            self.pre_end[:, k] = pre
            if rate is not None:
                self.drift[:, k] = rate

    def at_step(self, k: int, x: np.ndarray):
        for t, j in self.snap_idx.items():
            if j == k:
                self.snap[t] = x.copy()
        if self.values is not None:
            self.values[:, k] = x

    def event(self, who: np.ndarray, time, pre, post):
        if who.size:
            self.ev.append((who, np.broadcast_to(np.asarray(time, float), who.shape).copy(), pre.copy(), post.copy()))


def _snap_index(grid: np.ndarray, times) -> dict[float, int]:
    out = {}
    for t in ([] if times is None else times):
        k = int(np.searchsorted(grid, float(t) + 1e-9, side="right") - 1)
        if k < 0:
            raise ValidationError(f"snapshot time {t} before the start {grid[0]}")
        out[float(t)] = k
    return out


def _assemble(scheme, seed, t0, results, sizes, grid, dense) -> PathEnsemble:
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    x0 = np.concatenate([r["x0"] for r in results])
    pid, tim, pre, post = [], [], [], []
    for b, r in enumerate(results):
        for who, tt, a, c in r["rec"].ev:
            pid.append(who + offsets[b])
            tim.append(tt)
            pre.append(a)
            post.append(c)
    if pid:
        pid, tim, pre, post = (np.concatenate(v) for v in (pid, tim, pre, post))
        order = np.lexsort((tim, pid))
        pid, tim, pre, post = pid[order], tim[order], pre[order], post[order]
    else:
        pid = np.empty(0, int)
        tim = pre = post = np.empty(0)
    snaps = {t: np.concatenate([r["rec"].snap[t] for r in results]) for t in results[0]["rec"].snap}
    values = np.concatenate([r["rec"].values for r in results]) if dense else None
    drift = np.concatenate([r["rec"].drift for r in results]) if dense else None
    pre_end = np.concatenate([r["rec"].pre_end for r in results]) if dense else None
    return PathEnsemble(scheme, seed, t0, x0, pid.astype(int), tim, pre, post, snaps,
                        grid if dense else None, values, drift, pre_end)


# ------------------------------------------------------------------ discrete chain


def run_discrete_chain(family: MarginalFamily, partition: Partition, n_paths: int, seed: int, *,
                       snapshot_times=None, dense: bool = False, threads: int = 1,
                       grid_size: int = 400) -> PathEnsemble:
    """Iterate the one-period decreasing coupling over the partition."""
    if n_paths < 1:
        raise ValidationError("n_paths must be >= 1")
    times = partition.times
    couplings = []
    for s, t in zip(times[:-1], times[1:]):
        try:
            couplings.append(build_decreasing_coupling(pair_from_family(family, s, t), grid_size=grid_size,
                                                       verify=False))
        except Exception as exc:
            raise type(exc)(f"interval [{s:.6g}, {t:.6g}]: {exc}") from exc
    mu0 = family.at(times[0])
    gens, sizes = _block_generators(seed, n_paths)
    snap_idx = _snap_index(times, snapshot_times)

    def worker(block_ids):
        out = []
        for b in block_ids:
            gen, n = gens[b], sizes[b]
            rec = _Recorder(n, times, snap_idx, dense)
            x = np.asarray(mu0.quantile(_stratified_uniforms(gen, n)), float)
            x0 = x.copy()
            rec.at_step(0, x)
            for k, c in enumerate(couplings):
                u = gen.random(n)
                y = c.sample(x, u)
                moved = np.flatnonzero(y != x)
                rec.event(moved, times[k + 1], x[moved], y[moved])
                rec.end_step(k, x)
                x = y
                rec.at_step(k + 1, x)
            out.append({"x0": x0, "rec": rec})
        return out

    results = _run_blocks(worker, gens, sizes, threads)
    return _assemble(f"discrete(n={len(couplings)})", seed, float(times[0]), results, sizes, times, dense)


# ------------------------------------------------------------------------ SDE


def time_grid(t_min: float, dt: float, t_max: float = 1.0) -> np.ndarray:
    if not (0 < dt <= 0.1):
        raise ValidationError(f"dt must lie in (0, 0.1], got {dt}")
    n = max(1, int(math.ceil((t_max - t_min) / dt - 1e-9)))
    return np.linspace(t_min, t_max, n + 1)


def run_sde(chars: ContCharacteristics, dt: float, n_paths: int, seed: int, *, snapshot_times=None,
            dense: bool = False, threads: int = 1) -> PathEnsemble:
    """First-order thinning scheme for the decreasing-coupling jump SDE.

    On each step the pre-step state selects the regime.  In the band the path
    jumps to T_u with probability min(intensity * dt, 1), recorded at the end
    of the step; otherwise it drifts down at rate jd.  Above m_t it is frozen.
    """
    if n_paths < 1:
        raise ValidationError("n_paths must be >= 1")
    fam = chars.family
    grid = time_grid(fam.t_min, dt)
    gens, sizes = _block_generators(seed, n_paths)
    snap_idx = _snap_index(grid, snapshot_times)
    mu0 = fam.at(grid[0])
    # coefficients depend only on the step time, so share one lookup per step across blocks
    steps = [(k, grid[k], grid[k + 1] - grid[k]) for k in range(grid.size - 1)]

    def worker(block_ids):
        xs = [np.asarray(mu0.quantile(_stratified_uniforms(gens[b], sizes[b])), float) for b in block_ids]
        recs = [_Recorder(sizes[b], grid, snap_idx, dense) for b in block_ids]
        x0s = [x.copy() for x in xs]
        for rec, x in zip(recs, xs):
            rec.at_step(0, x)
        for k, t, h in steps:
            x1, m = chars.x1_curve(t), chars.m_curve(t)
            width = m - x1
            ell_next = fam.ell(grid[k + 1])
            for i, b in enumerate(block_ids):
                x = xs[i]
                jd, ju, lam = chars.coefficients(t, x)
                u = gens[b].random(x.size)
                band = (x > x1) & (x < m)
                jump = band & (u < np.minimum(lam * h, 1.0))
                rate = np.where(jump | (x >= m), 0.0, -jd)
                step = rate * h
                if np.any(-step > width):
                    raise StepOverflow(f"drift step {-step.min():.3g} exceeds band width {width:.3g} at t={t:.4g}; "
                                       "reduce dt")
                y = x + step
                who = np.flatnonzero(jump)
                if who.size:
                    y[who] = x[who] + ju[who]
                    recs[i].event(who, grid[k + 1], x[who], y[who])
                if math.isfinite(ell_next):
                    y = np.maximum(y, ell_next)
                recs[i].end_step(k, np.where(jump, x, y), rate)
                xs[i] = y
                recs[i].at_step(k + 1, y)
        return [{"x0": x0, "rec": rec} for x0, rec in zip(x0s, recs)]

    results = _run_blocks(worker, gens, sizes, threads)
    return _assemble(f"sde(dt={dt:g})", seed, float(grid[0]), results, sizes, grid, dense)


def run_increasing_uniform(dt: float, n_paths: int, seed: int, *, snapshot_times=None, dense: bool = False,
                           threads: int = 1, family: MarginalFamily | None = None) -> PathEnsemble:
    """Increasing-coupling SDE for the uniform family.

    Jumps go down by jd = e^{2t} + x (to the lower edge) at intensity ju/jd and
    the path drifts up at rate ju.  When the drift reaches the upper edge e^s
    inside a step, the path jumps to -e^{2s} at the hitting time s.
    """
    if family is not None and not isinstance(family, UniformFamily):
        raise ValidationError("the increasing SDE is implemented for the uniform family only")
    if n_paths < 1:
        raise ValidationError("n_paths must be >= 1")
    fam = UniformFamily()
    grid = time_grid(0.0, dt)
    gens, sizes = _block_generators(seed, n_paths)
    snap_idx = _snap_index(grid, snapshot_times)

    def worker(block_ids):
        out = []
        for b in block_ids:
            gen, n = gens[b], sizes[b]
            rec = _Recorder(n, grid, snap_idx, dense)
            x = np.asarray(fam.quantile(0.0, _stratified_uniforms(gen, n)), float)
            x0 = x.copy()
            rec.at_step(0, x)
            for k in range(grid.size - 1):
                t, t_next = grid[k], grid[k + 1]
                h = t_next - t
                jd, ju = eval_increasing_chars_uniform(t, x)
                u = gen.random(n)
                with np.errstate(divide="ignore", invalid="ignore"):
                    lam = np.where(jd > 0, ju / jd, 0.0)
                jump = u < np.minimum(lam * h, 1.0)
                rate = np.where(jump, 0.0, ju)
                y = x + rate * h
                who = np.flatnonzero(jump)
                if who.size:
                    y[who] = x[who] - jd[who]
                    rec.event(who, t_next, x[who], y[who])
                hit = np.flatnonzero(~jump & (y >= math.exp(t_next)))
                if hit.size:
                    xh, vh = x[hit], ju[hit]
                    s = np.clip(t + _first_hit(xh, vh, t), t, t_next)
                    top = np.exp(s)
                    post = -np.exp(2.0 * s)
                    rec.event(hit, s, top, post)
                    y[hit] = post
                    rate[hit] = (top - xh) / np.maximum(s - t, 1e-300)
                rec.end_step(k, np.where(jump, x, y), rate)
                x = y
                rec.at_step(k + 1, x)
            out.append({"x0": x0, "rec": rec})
        return out

    results = _run_blocks(worker, gens, sizes, threads)
    return _assemble(f"increasing(dt={dt:g})", seed, 0.0, results, sizes, grid, dense)


def _first_hit(x: np.ndarray, v: np.ndarray, t: float) -> np.ndarray:
    """Smallest tau >= 0 with x + v tau = e^{t + tau}, via the principal Lambert W branch."""
    z = -(math.exp(t) / v) * np.exp(-x / v)
    w = lambertw(np.maximum(z, -1.0 / math.e), 0).real
    return -w - x / v


# -------------------------------------------------------------------- statistics


@dataclass
class StatsRow:
    t: float
    mean: float
    var: float
    ks: float
    se: float
    degenerate: bool


def path_statistics(ensemble: PathEnsemble, family: MarginalFamily, times) -> list[StatsRow]:
    """Per-time mean, variance, standard error and KS distance to F(t, .)."""
    rows = []
    for t in times:
        v = ensemble.values_at(float(t))
        degenerate = bool(np.all(v == v[0]))
        ks = float("nan") if degenerate else ks_distance(v, lambda z, t=float(t): family.F(t, z))
        rows.append(StatsRow(float(t), float(v.mean()), float(v.var()), ks,
                             float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan"),
                             degenerate))
    return rows


def conditional_drift(ensemble: PathEnsemble, s: float, t: float, n_bins: int = 30):
    """Binned E[X_t - X_s | X_s in bin]: (bin centres, mean increments, standard errors, counts)."""
    xs, xt = ensemble.values_at(s), ensemble.values_at(t)
    edges = np.quantile(xs, np.linspace(0, 1, n_bins + 1))
    idx = np.clip(np.searchsorted(edges, xs, side="right") - 1, 0, n_bins - 1)
    d = xt - xs
    cnt = np.bincount(idx, minlength=n_bins)
    tot = np.bincount(idx, weights=d, minlength=n_bins)
    sq = np.bincount(idx, weights=d * d, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = tot / cnt
        var = np.maximum(sq / cnt - mean ** 2, 0.0) * cnt / np.maximum(cnt - 1, 1)
        se = np.sqrt(var / cnt)
        centre = np.bincount(idx, weights=xs, minlength=n_bins) / cnt
    return centre, mean, se, cnt


def jump_summary(ensemble: PathEnsemble) -> dict:
    counts = ensemble.jump_counts()
    sizes = np.abs(ensemble.event_post - ensemble.event_pre)
    return {"histogram": np.bincount(counts).tolist(),
            "largest_jump": float(sizes.max()) if sizes.size else 0.0}
