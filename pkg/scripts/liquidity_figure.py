"""Liquidity rate over time for several delays (T=20, q=1, eps=2, c=0).

Writes liquidity.csv and, when matplotlib is installed, liquidity.png.
"""
import argparse
from pathlib import Path

from game_lab.core import load_params
from game_lab.experiments import liquidity_csv, liquidity_study

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--params", default=HERE / "base.cfg")
    ap.add_argument("--taus", default="0.5,1,2,4")
    ap.add_argument("--dt", type=float, default=0.01)
    ap.add_argument("--output", default="results/liquidity")
    args = ap.parse_args()
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    p = load_params(args.params)
    curves = liquidity_study(p, [float(t) for t in args.taus.split(",")], args.dt)
    (out / "liquidity.csv").write_text(liquidity_csv(curves))
    for c in curves:
        if c.liquidity is not None:
            print(f"tau={c.tau:g}  liquidity(0)={c.liquidity[0]:.4f}  liquidity(T)={c.liquidity[-1]:.4f}")
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    for c in curves:
        if c.liquidity is not None:
            ax.plot(c.t, c.liquidity, label=f"tau = {c.tau:g}")
    ax.set_xlabel("t")
    ax.set_ylabel("2 E1(t,0) + 2 E0(t) + q")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "liquidity.png", dpi=120)


if __name__ == "__main__":
    main()
