"""Euler-versus-closed-form L2 gaps of the utility weight Y and of the wealth
under grid refinement, with successive ratios.

The same root paths are used on every grid (Brownian increments summed).
Y is computed with the mean-field drift switched off after the first default
so no inner clouds are needed.
"""
import argparse
import dataclasses

import numpy as np

from mfdefault.cli import parse_config
from mfdefault.forward import ControlProcess
from mfdefault.logutil import UtilityCurves, compute_y, simulate_wealth
from mfdefault.paths import build_grid, simulate_ensemble


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/logutil.yaml")
    ap.add_argument("--paths", type=int, default=4000)
    ap.add_argument("--finest", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    prob = parse_config(args.config).built["logutil"]
    nu = prob.utility.nu
    zero = lambda t: 0.0 * np.asarray(t, dtype=float)
    prob = dataclasses.replace(prob, utility=UtilityCurves((nu[0], (zero,) + tuple(nu[1][1:]),
                                                            (zero,) + tuple(nu[2][1:]))))
    fine = simulate_ensemble(prob.default_spec, build_grid(prob.T, args.finest), args.paths, 0, args.seed)
    rows = []
    M = 16
    while M <= args.finest:
        e = fine.coarsen(args.finest // M)
        idx, dt = np.arange(e.size), e.grid.dt
        y = compute_y(prob, e, keep_parts=False).gap(idx, dt)
        w = simulate_wealth(prob, ControlProcess.constant(e, 0.5), e).l2_gap(idx, dt)
        rows.append((M, y, w))
        M *= 2
    print(f"{'M':>5} {'Y gap':>11} {'ratio':>6} {'wealth gap':>11} {'ratio':>6}")
    for j, (M, y, w) in enumerate(rows):
        ry = f"{rows[j - 1][1] / y:6.3f}" if j else "      "
        rw = f"{rows[j - 1][2] / w:6.3f}" if j else "      "
        print(f"{M:5d} {y:11.4e} {ry} {w:11.4e} {rw}")


if __name__ == "__main__":
    main()
