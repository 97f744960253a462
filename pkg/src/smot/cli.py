"""Command-line front end: ``smot <command> --config <path> [--out DIR] [--seed N] [--threads N]``.

Every run writes ``manifest.json`` into the output directory, including runs
that fail after the directory was created.  Exit codes: 0 success,
2 validation, 3 numerical non-convergence, 4 acceptance-threshold failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .errors import NumericalError, SmotError, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_THRESHOLD = 0, 2, 3, 4
COMMANDS = ("dump-coupling", "transition-curve", "simulate", "duality-gap")


# ----------------------------------------------------------------- formatting


def fmt(v) -> str:
    """17 significant digits; non-finite values as inf, -inf, nan."""
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".17g")


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with floats at 17 significant digits and non-finite floats as null."""
    pad, inner = " " * (indent * _level), " " * (indent * (_level + 1))
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [f"{inner}{dumps(v, indent, _level + 1)}" for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt(obj) if math.isfinite(obj) else "null"
    if obj is None:
        return "null"
    return json.dumps(str(obj))


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else (str(v) if isinstance(v, (int, np.integer)) else fmt(v))
                        for v in row])


def _reannotate(exc: SmotError, prefix: str) -> SmotError:
    base = NumericalError if isinstance(exc, NumericalError) else ValidationError
    err = base(f"{prefix}: {exc}")
    err.exit_code = exc.exit_code
    return err


# ------------------------------------------------------------------- context


class Run:
    def __init__(self, command: str, cfg: RunConfig, out: Path, threads: int):
        self.command, self.cfg, self.out, self.threads = command, cfg, out, threads
        self.checks: dict[str, dict] = {}
        self.results: dict = {}

    def check(self, name: str, passed: bool, value, threshold) -> None:
        self.checks[name] = {"pass": bool(passed), "value": value, "threshold": threshold}

    def family(self):
        from .marginals import make_family
        f = self.cfg.family
        return make_family(f.family, f.delta, f.table_path)


# ------------------------------------------------------------------ commands


def cmd_dump_coupling(run: Run) -> int:
    from .coupling1p import (build_decreasing_coupling, build_increasing_coupling_uniform, pair_from_family,
                             phase_residuals)
    cc = run.cfg.coupling
    fam = run.family()
    t0, t1 = cc.t, cc.t + cc.eps
    fam.check_time(t0)
    fam.check_time(t1)
    if cc.kind == "increasing":
        c = build_increasing_coupling_uniform(t0, cc.eps, fam)
        mu = c.mu
        meta = {"x1": c.x1, "y1": c.y1, "m_lower": None, "m_upper": None}
    else:
        pair = pair_from_family(fam, t0, t1)
        c = build_decreasing_coupling(pair, grid_size=cc.interp_nodes)
        mu = pair.mu
        meta = {"x1": c.x1, "y1": c.y1, "m_lower": pair.m_lower, "m_upper": pair.m_upper}
        mass, mean = phase_residuals(pair, c.x1, c.y1)
        run.check("phase_point_mass_residual", abs(mass) < 1e-8, abs(mass), 1e-8)
        run.check("phase_point_mean_residual", abs(mean) < 1e-8, abs(mean), 1e-8)
    x = np.asarray(mu.quantile(np.linspace(1e-3, 1 - 1e-3, cc.grid_points)), float)
    td, tu, q = c.maps(x)
    band = np.asarray(c.in_band(x))
    if np.any(band):
        mart = float(np.max(np.abs(q[band] * tu[band] + (1 - q[band]) * td[band] - x[band])))
        run.check("martingale_identity", mart < 1e-10, mart, 1e-10)
    write_csv(run.out / "coupling.csv", ["x", "T_d", "T_u", "q"], zip(x, td, tu, q))
    (run.out / "coupling.json").write_text(dumps(meta) + "\n", encoding="utf-8")
    run.results["coupling"] = meta
    print(dumps(meta))
    return EXIT_OK


def cmd_transition_curve(run: Run) -> int:
    from .curve import solve_m_curve, solve_x1_curve, solve_x1_eps
    cc = run.cfg.curve
    fam = run.family()
    ts = np.linspace(fam.t_min, fam.t_max, cc.n_times)
    header = ["t", "x1", "m", "mean"] + [f"x1_eps={e!r}" for e in cc.eps]
    rows = []
    for t in ts:
        try:
            row = [t, solve_x1_curve(fam, t, method=cc.method), solve_m_curve(fam, t), fam.mean(t)]
            for e in cc.eps:
                row.append(solve_x1_eps(fam, t, e)[0] if t + e <= fam.t_max + 1e-12 else "")
        except SmotError as exc:
            raise _reannotate(exc, f"t={fmt(t)}") from exc
        rows.append(row)
    write_csv(run.out / "curve.csv", header, rows)
    x1 = np.array([r[1] for r in rows])
    run.results["x1_samples"] = {fmt(t): v for t, v in zip(ts[:: max(1, len(ts) // 10)], x1[:: max(1, len(ts) // 10)])}
    print(f"wrote {len(rows)} rows to {run.out / 'curve.csv'}")
    return EXIT_OK


def _ensemble(run: Run, fam, sc, snapshot_times, dense=False):
    from .curve import ContCharacteristics
    from .simulate import Partition, run_discrete_chain, run_increasing_uniform, run_sde
    seed, threads = run.cfg.seed, run.threads
    if sc.scheme == "sde":
        return run_sde(ContCharacteristics(fam), sc.dt, sc.n_paths, seed, snapshot_times=snapshot_times,
                       dense=dense, threads=threads)
    if sc.scheme == "discrete":
        return run_discrete_chain(fam, Partition.uniform(fam.t_min, sc.n), sc.n_paths, seed,
                                  snapshot_times=snapshot_times, dense=dense, threads=threads)
    return run_increasing_uniform(sc.dt, sc.n_paths, seed, snapshot_times=snapshot_times, dense=dense,
                                  threads=threads, family=fam)


def cmd_simulate(run: Run) -> int:
    from .simulate import jump_summary, path_statistics
    sc = run.cfg.simulate
    fam = run.family()
    times = sorted(set(sc.stats_times) | set(sc.dense_times))
    for t in times:
        if not (fam.t_min <= t <= fam.t_max):
            raise ValidationError(f"simulate.stats_times: {t} outside [{fam.t_min}, {fam.t_max}]")
    ens = _ensemble(run, fam, sc, times)
    write_csv(run.out / "paths.csv", ["path_id", "time", "pre", "post"],
              zip(ens.event_path, ens.event_time, ens.event_pre, ens.event_post))
    if sc.dense_times:
        rows = ((i, t, v) for t in sc.dense_times for i, v in enumerate(ens.values_at(t)))
        write_csv(run.out / "paths_dense.csv", ["path_id", "time", "value"], rows)
    stats = path_statistics(ens, fam, sc.stats_times)
    write_csv(run.out / "stats.csv", ["t", "mean", "var", "ks"], ((r.t, r.mean, r.var, r.ks) for r in stats))
    run.results["stats"] = [{"t": r.t, "mean": r.mean, "var": r.var, "ks": r.ks, "se": r.se} for r in stats]
    run.results["jumps"] = jump_summary(ens)
    run.results["scheme"] = ens.scheme
    status = EXIT_OK
    for r in stats:
        print(f"t={r.t:.4f}  mean={r.mean:+.6f}  var={r.var:.6f}  ks={r.ks:.3e}")
        if sc.ks_threshold is not None:
            ok = not r.degenerate and r.ks < sc.ks_threshold
            run.check(f"ks_t={fmt(r.t)}", ok, r.ks, sc.ks_threshold)
            status = status if ok else EXIT_THRESHOLD
    return status


def cmd_duality_gap(run: Run) -> int:
    from .curve import ContCharacteristics
    from .duality import (build_continuous_dual, check_cost_assumption, cost_from_name, optimal_value_quadrature,
                          payoff_ensemble, verify_superhedge_on_paths)
    from .simulate import Partition, run_discrete_chain, run_sde
    dc = run.cfg.duality
    cost = cost_from_name(dc.cost)
    check_cost_assumption(cost)
    fam = run.family()
    chars = ContCharacteristics(fam)
    value = optimal_value_quadrature(chars, cost, n_t=dc.n_t)
    ens = run_sde(chars, dc.dt, dc.n_paths, run.cfg.seed, dense=True, threads=run.threads)
    payoff = payoff_ensemble(ens, cost)
    mc = float(payoff.mean())
    se = float(payoff.std(ddof=1) / math.sqrt(payoff.size)) if payoff.size > 1 else float("nan")
    strategy = build_continuous_dual(chars, cost)
    tol = dc.tol_hedge * dc.dt / 1e-3
    rep = verify_superhedge_on_paths(strategy, ens, cost, tol=tol)
    write_csv(run.out / "residuals.csv", ["path_id", "residual"], enumerate(rep.residuals))
    run.results.update({"optimal_value_quadrature": value, "mc_estimate": mc, "mc_se": se,
                        "hedge": rep.summary()})
    gap = abs(mc - value)
    run.check("primal_dual_sandwich", gap < 3 * se + 1e-3 if se == se else gap < 1e-3, gap, 3 * se + 1e-3)
    run.check("hedge_violation_fraction", rep.violation_fraction <= dc.violation_threshold,
              rep.violation_fraction, dc.violation_threshold)
    lines = [("quadrature value", fmt(value)), ("MC estimate", f"{mc:.10g} +/- {se:.3g}"),
             ("min hedge residual", f"{rep.min:.6g}"), ("mean hedge residual", f"{rep.mean:.6g}"),
             ("violation fraction", f"{rep.violation_fraction:.6g} (tol {tol:.3g})")]
    worst = rep.violation_fraction
    if dc.chain_n is not None:
        chain = run_discrete_chain(fam, Partition.uniform(fam.t_min, dc.chain_n), dc.n_paths, run.cfg.seed + 1,
                                   dense=True, threads=run.threads)
        crep = verify_superhedge_on_paths(strategy, chain, cost, tol=tol, refine=max(1, int(round(
            (fam.t_max - fam.t_min) / dc.chain_n / dc.dt))))
        write_csv(run.out / "chain_residuals.csv", ["path_id", "residual"], enumerate(crep.residuals))
        run.results["chain_hedge"] = crep.summary()
        run.check("chain_hedge_violation_fraction", crep.violation_fraction <= dc.violation_threshold,
                  crep.violation_fraction, dc.violation_threshold)
        lines.append((f"chain n={dc.chain_n} violation fraction", f"{crep.violation_fraction:.6g}"))
        worst = max(worst, crep.violation_fraction)
    width = max(len(k) for k, _ in lines)
    for k, v in lines:
        print(f"{k:<{width}}  {v}")
    return EXIT_THRESHOLD if worst > dc.violation_threshold else EXIT_OK


HANDLERS = {"dump-coupling": cmd_dump_coupling, "transition-curve": cmd_transition_curve,
            "simulate": cmd_simulate, "duality-gap": cmd_duality_gap}


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smot", description="Supermartingale optimal transport couplings and duals.")
    p.add_argument("--version", action="version", version=f"smot {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides config 'out')")
    p.add_argument("--seed", type=int, help="RNG seed (overrides config 'seed')")
    p.add_argument("--threads", type=int, help="worker threads (fallback: config, then SMOT_THREADS)")
    return p


def _resolve_threads(flag, cfg: RunConfig) -> int:
    if flag is not None:
        return flag
    if cfg.threads is not None:
        return cfg.threads
    env = os.environ.get("SMOT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"SMOT_THREADS must be an integer, got {env!r}") from None
    return 1


def _fallback_out(config_path: str) -> Path:
    try:
        raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
        if isinstance(raw, dict) and isinstance(raw.get("out"), str):
            return Path(raw["out"])
    except (OSError, ValueError):
        pass
    return Path("out")


def _write_manifest(out: Path, manifest: dict) -> None:
    (out / "manifest.json").write_text(dumps(manifest) + "\n", encoding="utf-8")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.time()
    manifest: dict = {"tool": "smot", "version": __version__, "command": args.command, "config": None,
                      "status": "error", "exit_code": None, "checks": {}, "results": {}, "warnings": []}
    out = Path(args.out) if args.out else None
    code = EXIT_OK
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            cfg = load_config(args.config)
            changes = {}
            if args.seed is not None:
                changes["seed"] = args.seed
            if args.out is not None:
                changes["out"] = args.out
            if args.threads is not None and args.threads < 1:
                raise ValidationError("--threads must be >= 1")
            cfg = cfg.replace(**changes).validate() if changes else cfg
            out = Path(cfg.out)
            out.mkdir(parents=True, exist_ok=True)
            manifest["config"] = cfg.to_dict()
            run = Run(args.command, cfg, out, _resolve_threads(args.threads, cfg))
            manifest["threads"] = run.threads
            try:
                code = HANDLERS[args.command](run)
            finally:
                manifest["checks"], manifest["results"] = run.checks, run.results
            manifest["status"] = "ok" if code == EXIT_OK else "threshold-failure"
        except SmotError as exc:
            code = exc.exit_code
            manifest["error"] = {"type": type(exc).__name__, "message": str(exc)}
            print(f"error: {exc}", file=sys.stderr)
        except OSError as exc:
            code = EXIT_VALIDATION
            manifest["error"] = {"type": type(exc).__name__, "message": str(exc)}
            print(f"error: {exc}", file=sys.stderr)
        manifest["warnings"] = [f"{w.category.__name__}: {w.message}" for w in caught]
    manifest["exit_code"] = code
    manifest["wall_clock_s"] = time.time() - started
    if out is None:
        out = _fallback_out(args.config)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_manifest(out, manifest)
    except OSError as exc:
        print(f"error: cannot write manifest to {out}: {exc}", file=sys.stderr)
        return code or EXIT_VALIDATION
    return code


if __name__ == "__main__":
    sys.exit(main())
