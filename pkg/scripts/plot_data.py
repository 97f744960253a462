#!/usr/bin/env python3
"""Write CSV data for the standard diagnostic plots.

curves_<family>.csv    t, x1, m, mean
paths_uniform.csv      a handful of dense SDE paths (path_id, t, value)
hedge_<family>.csv     h* and psi* on a quantile grid at t = 0.5
"""

import argparse
from pathlib import Path

import numpy as np

from smot.cli import write_csv
from smot.curve import ContCharacteristics
from smot.duality import build_continuous_dual, default_cost
from smot.marginals import make_family
from smot.simulate import run_sde


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="plot_data")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cost = default_cost()
    for name in ("uniform", "bachelier", "gbm"):
        fam = make_family(name)
        chars = ContCharacteristics(fam)
        ts = np.linspace(fam.t_min, fam.t_max, 101)
        write_csv(out / f"curves_{name}.csv", ["t", "x1", "m", "mean"],
                  ((t, chars.x1_curve(t), chars.m_curve(t), fam.mean(t)) for t in ts))
        dual = build_continuous_dual(chars, cost)
        x = fam.quantile(0.5, np.linspace(0.005, 0.995, 200))
        write_csv(out / f"hedge_{name}.csv", ["x", "h_star", "psi_star"],
                  zip(x, dual.h_star(0.5, x), dual.psi_star(0.5, x)))
    ens = run_sde(ContCharacteristics(make_family("uniform")), 1e-3, 8, args.seed, dense=True)
    rows = ((i, t, v) for i in range(ens.n_paths) for t, v in zip(ens.grid, ens.values[i]))
    write_csv(out / "paths_uniform.csv", ["path_id", "t", "value"], rows)
    print(f"wrote plot data to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
