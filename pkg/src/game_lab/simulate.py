"""Euler-Maruyama Monte Carlo for the N-bank system.

Three drivers share one compiled path kernel:

* the delayed closed-loop law (feedback on the spread plus a memory term),
* the no-delay equilibrium gain, with no repayment,
* zero control.

The memory integral uses the left-endpoint rule over the lag nodes
``t - tau, ..., t - dt``, so each control is explicit. Controls before time 0
are zero.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from . import rng
from .core import (GameParams, NumericalError, SystemicRiskQuery, ValidationError,
                   time_grid, validate_params)
from .ekernels import FeedbackLaw, feedback_law, solve_e_system
from .riccati import RiccatiSolution, nodelay_feedback_gain

UNSTABLE_LEVEL = 1e9

# numba falls back to another threading layer on its own; the notice is noise
warnings.filterwarnings("ignore", message="The TBB threading layer", category=numba.NumbaWarning)

DEV_NONE, DEV_SHIFT, DEV_SCALE, DEV_TABLE = 0, 1, 2, 3
DEV_CODES = {"constant_shift": DEV_SHIFT, "scaled_feedback": DEV_SCALE,
             "custom_table": DEV_TABLE}


@dataclass
class PathBundle:
    """Result of one Monte Carlo run.

    ``costs[p, i]`` is the realized cost of bank ``i`` on path ``p``.
    ``xbar_min[p]`` is the grid minimum of ``Xbar_t - Xbar_0`` (always <= 0).
    ``clearing[p]`` is the largest ``|sum_i alpha^i| / max_i |alpha^i|`` seen.
    ``deviation_integral[p]`` is ``1/2 int (alpha^d - a*^d)^2 dt`` for the
    deviating bank (0 without a deviation).
    ``X``, ``alpha`` (shape ``(n_paths, M+1, N)``) and ``dW`` (``(n_paths, M, N)``)
    are kept only with ``store_paths=True``; ``alpha`` is 0 before time 0.
    """
    dt: float
    n_paths: int
    seed: int
    t_grid: np.ndarray
    params: GameParams
    costs: np.ndarray
    xbar_min: np.ndarray
    clearing: np.ndarray
    deviation_integral: np.ndarray
    X: np.ndarray | None = None
    alpha: np.ndarray | None = None
    dW: np.ndarray | None = None
    label: str = ""


@njit(fastmath=True, cache=True)
def _window_dot(w, v):
    # reassociated sum so the loop vectorizes; deterministic for a given build
    acc = 0.0
    for j in range(w.shape[0]):
        acc += w[j] * v[j]
    return acc


@njit(parallel=True, cache=True)
def _paths_kernel(Z, r, xi, sigma, q, eps, c, dt, M, m, repay, phi, mem,
                  dev_player, dev_kind, dev_mag, dev_table,
                  costs, xbar_min, clearing, devint, unstable, Xs, As, store):
    P = Z.shape[0]
    N = xi.shape[0]
    sq = sigma * math.sqrt(dt / r)
    for p in prange(P):
        x = xi.copy()
        a = np.zeros((N, M + 1))
        h = np.zeros((N, M + 1))
        alpha = np.empty(N)
        astar = np.empty(N)
        cost = np.zeros(N)
        xbar0 = np.mean(x)
        runmin = 0.0
        clr = 0.0
        gi = 0.0
        bad = False
        for k in range(M + 1):
            xbar = np.mean(x)
            w = 0.5 * dt if (k == 0 or k == M) else dt
            j0 = m - k if k < m else 0
            for i in range(N):
                acc = _window_dot(mem[k, j0:], h[i, k - m + j0:k])
                astar[i] = phi[k] * (xbar - x[i]) + dt * acc
                alpha[i] = astar[i]
            if dev_kind == 1:
                alpha[dev_player] = astar[dev_player] + dev_mag
            elif dev_kind == 2:
                alpha[dev_player] = dev_mag * astar[dev_player]
            elif dev_kind == 3:
                alpha[dev_player] = dev_table[k]
            if dev_kind > 0:
                d = alpha[dev_player] - astar[dev_player]
                gi += w * 0.5 * d * d
            s = 0.0
            amax = 0.0
            for i in range(N):
                s += alpha[i]
                amax = max(amax, abs(alpha[i]))
            if amax > 0.0:
                clr = max(clr, abs(s) / amax)
            abar = s / N
            for i in range(N):
                a[i, k] = alpha[i]
                h[i, k] = abar - alpha[i]
                y = xbar - x[i]
                cost[i] += w * (0.5 * alpha[i] * alpha[i] - q * alpha[i] * y + 0.5 * eps * y * y)
                if store:
                    Xs[p, k, i] = x[i]
                    As[p, k, i] = alpha[i]
            if k == M:
                break
            for i in range(N):
                drift = alpha[i]
                if repay and k >= m:
                    drift -= a[i, k - m]
                noise = 0.0
                for l in range(r):
                    noise += Z[p, k * r + l, i]
                x[i] += drift * dt + sq * noise
                if not abs(x[i]) <= 1e9:
                    bad = True
            runmin = min(runmin, np.mean(x) - xbar0)
            if bad:
                break
        xbar = np.mean(x)
        for i in range(N):
            y = xbar - x[i]
            costs[p, i] = cost[i] + 0.5 * c * y * y
        xbar_min[p] = runmin
        clearing[p] = clr
        devint[p] = gi
        unstable[p] = bad


def _encode_deviation(dev, M: int, N: int):
    if dev is None:
        return 0, DEV_NONE, 0.0, np.zeros(M + 1)
    kind = DEV_CODES.get(dev.kind)
    if kind is None:
        raise ValidationError("BAD_DEVIATION", f"unknown deviation kind {dev.kind!r}")
    if not 0 <= dev.player < N:
        raise ValidationError("BAD_DEVIATION", f"player {dev.player} out of range")
    mag = float(dev.magnitude)
    if not math.isfinite(mag):
        raise ValidationError("BAD_DEVIATION", "magnitude must be finite")
    table = np.zeros(M + 1)
    if kind == DEV_TABLE:
        if dev.table is None or len(dev.table) != M + 1:
            raise ValidationError("BAD_DEVIATION", f"custom_table needs {M + 1} values on the grid")
        table = np.asarray(dev.table, dtype=float)
        if not np.all(np.isfinite(table)):
            raise ValidationError("BAD_DEVIATION", "table values must be finite")
    return int(dev.player), kind, mag, table


def _set_threads(threads: int):
    if threads and threads > 0:
        numba.set_num_threads(min(int(threads), numba.config.NUMBA_NUM_THREADS))


def run_paths(p: GameParams, dt: float, M: int, m: int, repay: bool, phi, mem,
              n_paths: int, seed: int, *, deviations=(None,), noise_substeps: int = 1,
              store_paths: bool = False, threads: int = 0, label: str = "") -> list:
    """Drive the path kernel; one bundle per entry of ``deviations``.

    All bundles share the same Brownian increments (common random numbers).
    Noise is drawn on a grid ``noise_substeps`` times finer than ``dt`` and
    summed, so runs at different ``dt`` sharing that fine grid are coupled.
    """
    seed = rng.check_seed(seed)
    if n_paths < 1:
        raise ValidationError("NONPOSITIVE", "n_paths must be >= 1")
    _set_threads(threads)
    N = p.n_players
    xi = p.xi
    phi = np.ascontiguousarray(phi, dtype=float)
    mem = np.ascontiguousarray(mem, dtype=float).reshape(M + 1, m)
    r = int(noise_substeps)
    encoded = [_encode_deviation(d, M, N) for d in deviations]
    outs = []
    for _ in deviations:
        outs.append(dict(
            costs=np.empty((n_paths, N)), xbar_min=np.empty(n_paths),
            clearing=np.empty(n_paths), devint=np.empty(n_paths),
            unstable=np.zeros(n_paths, dtype=np.bool_),
            X=np.empty((n_paths, M + 1, N)) if store_paths else np.empty((0, 0, 0)),
            A=np.empty((n_paths, M + 1, N)) if store_paths else np.empty((0, 0, 0)),
        ))
    dW = np.empty((n_paths, M, N)) if store_paths else None
    for idx, start, stop in rng.chunks(n_paths):
        Z = rng.chunk_normals(seed, rng.STREAM_PATHS, idx, (stop - start, M * r, N))
        if store_paths:
            dW[start:stop] = (p.sigma * math.sqrt(dt / r)
                              * Z.reshape(stop - start, M, r, N).sum(axis=2))
        for (dp, dk, dm, dt_tab), o in zip(encoded, outs):
            sl = slice(start, stop)
            _paths_kernel(Z, r, xi, p.sigma, p.q, p.epsilon, p.c, dt, M, m, repay, phi, mem,
                          dp, dk, dm, dt_tab,
                          o["costs"][sl], o["xbar_min"][sl], o["clearing"][sl],
                          o["devint"][sl], o["unstable"][sl],
                          o["X"][sl] if store_paths else o["X"],
                          o["A"][sl] if store_paths else o["A"], store_paths)
    bundles = []
    t_grid = np.arange(M + 1) * dt
    for o in outs:
        if o["unstable"].any():
            raise NumericalError("UNSTABLE", f"|X| exceeded {UNSTABLE_LEVEL:g}")
        bundles.append(PathBundle(
            dt=dt, n_paths=n_paths, seed=seed, t_grid=t_grid, params=p,
            costs=o["costs"], xbar_min=o["xbar_min"], clearing=o["clearing"],
            deviation_integral=o["devint"],
            X=o["X"] if store_paths else None, alpha=o["A"] if store_paths else None,
            dW=dW, label=label))
    return bundles


def _noise_substeps(dt: float, noise_dt: float | None) -> int:
    if noise_dt is None:
        return 1
    r = round(dt / noise_dt)
    if r < 1 or abs(r * noise_dt - dt) > 1e-9 * dt:
        raise ValidationError("GRID_MISMATCH", f"dt={dt} is not a multiple of noise_dt={noise_dt}")
    return r


def simulate_closed_loop(p: GameParams, law: FeedbackLaw, dt: float, n_paths: int, seed: int,
                         *, deviation=None, noise_dt: float | None = None,
                         store_paths: bool = False, threads: int = 0) -> PathBundle:
    """Simulate every bank under the delayed equilibrium feedback ``law``."""
    validate_params(p, allow_zero_sigma=True)
    h, M, m = time_grid(p.horizon, dt, p.delay)
    if M != len(law.t_grid) - 1 or m != len(law.s_grid) - 1 or abs(h - law.dt) > 1e-12:
        raise ValidationError("GRID_MISMATCH", f"law step {law.dt} does not match dt={h}")
    return run_paths(p, h, M, m, True, law.phi_cl, law.memory, n_paths, seed,
                     deviations=(deviation,), noise_substeps=_noise_substeps(h, noise_dt),
                     store_paths=store_paths, threads=threads, label="closed_loop")[0]


def simulate_nodelay(p: GameParams, sol: RiccatiSolution, dt: float, n_paths: int, seed: int,
                     *, noise_dt: float | None = None, store_paths: bool = False,
                     threads: int = 0) -> PathBundle:
    """Simulate the no-delay equilibrium ``dX^i = gain(t) (Xbar - X^i) dt + sigma dW^i``."""
    validate_params(p, standing_condition=False, allow_zero_sigma=True)
    h, M, _ = time_grid(p.horizon, dt)
    gain = np.array([nodelay_feedback_gain(sol, min(k * h, sol.t_grid[-1]))
                     for k in range(M + 1)])
    return run_paths(p, h, M, 0, False, gain, np.zeros((M + 1, 0)), n_paths, seed,
                     noise_substeps=_noise_substeps(h, noise_dt),
                     store_paths=store_paths, threads=threads, label="nodelay")[0]


def simulate_zero_control(p: GameParams, dt: float, n_paths: int, seed: int, *,
                          noise_dt: float | None = None, store_paths: bool = False,
                          threads: int = 0) -> PathBundle:
    validate_params(p, standing_condition=False, allow_zero_sigma=True)
    h, M, _ = time_grid(p.horizon, dt)
    return run_paths(p, h, M, 0, False, np.zeros(M + 1), np.zeros((M + 1, 0)), n_paths, seed,
                     noise_substeps=_noise_substeps(h, noise_dt),
                     store_paths=store_paths, threads=threads, label="zero")[0]


def simulate_equilibrium(p: GameParams, dt: float, n_paths: int, seed: int, **kw) -> PathBundle:
    """Closed-loop equilibrium for any ``tau >= 0``.

    With ``tau = 0`` borrowing and repayment cancel, the state is a plain
    Brownian motion whatever the controls, and each bank's best response is
    the pointwise minimizer ``alpha = q (Xbar - X^i)``.
    """
    if p.delay == 0:
        validate_params(p, allow_zero_sigma=True)
        h, M, _ = time_grid(p.horizon, dt)
        return run_paths(p, h, M, 0, True, np.full(M + 1, p.q), np.zeros((M + 1, 0)),
                         n_paths, seed, label="tau_zero",
                         noise_substeps=_noise_substeps(h, kw.pop("noise_dt", None)), **kw)[0]
    law = feedback_law(solve_e_system(p, dt, keep_e2=False))
    return simulate_closed_loop(p, law, law.dt, n_paths, seed, **kw)


def mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def realized_cost(p: GameParams, b: PathBundle, i: int):
    """Per-path costs of bank ``i`` with their mean and standard error."""
    if not 0 <= i < p.n_players:
        raise IndexError(f"player index {i} out of range")
    per_path = b.costs[:, i]
    mean, se = mean_se(per_path)
    return per_path, mean, se


def estimate_systemic_prob(b: PathBundle, query: SystemicRiskQuery) -> tuple[float, float]:
    """Fraction of paths with ``min_t (Xbar_t - Xbar_0) <= D`` and its binomial SE."""
    hits = b.xbar_min <= query.default_level
    prob = float(hits.mean())
    return prob, math.sqrt(prob * (1 - prob) / b.n_paths)


def summary_csv(rows) -> str:
    """Rows are dicts with the summary column names."""
    cols = ["tau", "dt", "n_paths", "seed", "mean_J_per_player", "systemic_prob", "se"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow([row[c] if isinstance(row[c], (int, str)) else repr(float(row[c]))
                    for c in cols])
    return buf.getvalue()


def summary_row(b: PathBundle, query: SystemicRiskQuery) -> dict:
    prob, se = estimate_systemic_prob(b, query)
    return {"tau": b.params.delay, "dt": b.dt, "n_paths": b.n_paths, "seed": b.seed,
            "mean_J_per_player": float(b.costs.mean()), "systemic_prob": prob, "se": se}
