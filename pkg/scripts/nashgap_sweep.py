"""Deviation gap against its predicted value for a range of constant shifts."""
import argparse

import numpy as np

from game_lab.core import GameParams
from game_lab.ekernels import solve_e_system
from game_lab.nashgap import DeviationSpec, nash_gap


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-players", type=int, default=5)
    ap.add_argument("--tau", type=float, default=0.25)
    ap.add_argument("--dt", type=float, default=2.5e-3)
    ap.add_argument("--n-paths", type=int, default=10_000)
    ap.add_argument("--deltas", default="0,0.1,0.2,0.4,0.8")
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args()
    n = args.n_players
    p = GameParams(n_players=n, delay=args.tau, initial_reserves=tuple(np.linspace(-1, 1, n)))
    k = solve_e_system(p, args.dt, keep_e2=False)
    print("delta   gap       predicted  J_dev-J_eq  combined_se")
    for d in (float(v) for v in args.deltas.split(",")):
        r = nash_gap(p, k, DeviationSpec(0, "constant_shift", d), k.dt, args.n_paths, args.seed)
        print(f"{d:<7g} {r.gap:+.5f}  {r.predicted:.5f}    {r.crn_diff:+.5f}    {r.combined_se:.5f}")


if __name__ == "__main__":
    main()
