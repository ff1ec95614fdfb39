"""Parameter studies built on the solvers."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .core import GameParams, ValidationError, time_grid
from .ekernels import solve_e_system


@dataclass
class LiquidityCurve:
    tau: float
    dt: float
    t: np.ndarray
    liquidity: np.ndarray | None   # None for tau = 0: no lending, no liquidity
    increasing: bool | None        # liquidity(0) above the previous tau's, None if undefined


def liquidity_study(p: GameParams, taus, dt: float) -> list[LiquidityCurve]:
    """Liquidity rate over time for each delay in ``taus`` (one kernel solve each)."""
    taus = [float(t) for t in taus]
    if not taus:
        raise ValidationError("BAD_CONFIG", "empty tau sweep")
    curves = []
    prev0 = None
    for tau in taus:
        if tau < 0:
            raise ValidationError("BAD_DELAY", f"negative delay {tau}")
        q = p.with_(delay=tau, delay_measure=None)
        if tau == 0:
            h, M, _ = time_grid(q.horizon, dt)
            curves.append(LiquidityCurve(tau, h, np.arange(M + 1) * h, None, None))
            prev0 = None
            continue
        k = solve_e_system(q, dt, keep_e2=False)
        liq = k.liquidity
        inc = None if prev0 is None else bool(liq[0] > prev0)
        curves.append(LiquidityCurve(tau, k.dt, k.t_grid, liq, inc))
        prev0 = liq[0]
    return curves


LIQUIDITY_COLUMNS = ["tau", "t", "liquidity", "liquidity0_increasing"]


def liquidity_rows(curves):
    for c in curves:
        flag = "" if c.increasing is None else int(c.increasing)
        for j, t in enumerate(c.t):
            val = "" if c.liquidity is None else repr(float(c.liquidity[j]))
            yield [repr(c.tau), repr(float(t)), val, flag]


def liquidity_csv(curves) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LIQUIDITY_COLUMNS)
    w.writerows(liquidity_rows(curves))
    return buf.getvalue()
