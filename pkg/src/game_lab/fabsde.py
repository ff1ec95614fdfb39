"""Open-loop equilibrium through the forward / anticipated-backward system.

Centered variables ``X^c = X^i - Xbar`` remove the common noise. For bank
``i`` the diagonal adjoint ``Y = Y^{i,i}`` solves

    dX^c_t = sum_a w_a alpha_{t - l_a} dt + sigma (dW^i_t - dWbar_t),
    alpha_t = -lam Ytil_t - q X^c_t,
    Ytil_t  = sum_a w_a E[Y_{t + l_a} | F_t]     (Y = 0 after T),
    dY_t    = (1 - 1/N) [q lam Ytil_t + (q^2 - eps) X^c_t] dt + Z dW_t,
    Y_T     = c (1 - 1/N) X^c_T,

where ``theta = sum_a w_a delta_{l_a}``; ``lam = 1`` is the game, smaller
values are homotopy stages.

Conditional expectations are least-squares projections on features of
each bank's own centered state (pooled over paths and banks, no intercept).
Every adjoint is then ``Y_k = F_k beta_k``. A forward pass only accumulates
the Gram matrices ``F_k' F_j`` it needs, and the backward pass works on those
small matrices. Noise for step ``k`` is keyed by (seed, k), so any pass can
be replayed exactly.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .core import (GameParams, NoConvergence, NumericalError, ValidationError,
                   time_grid, validate_params)

RCOND = 1e-12


@dataclass(frozen=True)
class FabsdeConfig:
    dt: float = 5e-3
    n_paths: int = 50_000
    n_picard: int = 50
    picard_tol: float = 1e-6
    homotopy_steps: int = 1
    damping: float = 1.0
    # "state": [X^c]; "history" or "history:B": X^c plus B block sums of past own controls
    basis: str = "state"
    # use minimum-norm projections when every feature vanishes instead of failing
    allow_singular: bool = False

    def __post_init__(self):
        if not self.picard_tol > 0:
            raise ValidationError("BAD_CONFIG", "picard_tol must be > 0")
        if self.homotopy_steps < 1:
            raise ValidationError("BAD_CONFIG", "homotopy_steps must be >= 1")
        if not 0 < self.damping <= 1:
            raise ValidationError("BAD_CONFIG", "damping must lie in (0, 1]")
        if self.n_paths < 1 or self.n_picard < 1:
            raise ValidationError("BAD_CONFIG", "n_paths and n_picard must be >= 1")
        _history_blocks(self.basis)


def _history_blocks(basis: str) -> int:
    if basis == "state":
        return 0
    name, _, blocks = basis.partition(":")
    if name != "history":
        raise ValidationError("BAD_CONFIG", f"unknown basis {basis!r}")
    try:
        b = int(blocks) if blocks else 4
    except ValueError:
        raise ValidationError("BAD_CONFIG", f"bad block count in {basis!r}") from None
    if b < 1:
        raise ValidationError("BAD_CONFIG", "history basis needs >= 1 block")
    return b


def _lag_structure(p: GameParams, dt: float):
    """Merge the delay measure into integer lags ``n_a`` and weights ``w_a``."""
    atoms: dict[int, float] = {}
    for lag, w in p.theta:
        n = round(lag / dt)
        if abs(n * dt - lag) > 1e-9 * max(1.0, lag):
            raise ValidationError("GRID_MISMATCH", f"lag {lag} is not a multiple of dt={dt}")
        atoms[n] = atoms.get(n, 0.0) + w
    lags = np.array(sorted(atoms), dtype=int)
    weights = np.array([atoms[n] for n in lags])
    return lags, weights


@dataclass
class FabsdeSolution:
    """Regression representation of the solved system.

    ``beta_y[k]`` and ``beta_tilde[k]`` give ``Y^{i,i}_k`` and ``Ytil^{i,i}_k``
    as ``F_k @ beta``; ``anticipation_coeffs[n][k]`` gives
    ``E[Y_{k+n} | F_k]`` for each positive lag ``n`` (steps). Path arrays are
    produced on demand by :func:`replay`.
    """
    params: GameParams
    cfg: FabsdeConfig
    seed: int
    dt: float
    t_grid: np.ndarray
    lags: np.ndarray
    weights: np.ndarray
    n_blocks: int
    block_edges: np.ndarray
    beta_y: np.ndarray
    beta_tilde: np.ndarray
    anticipation_coeffs: dict
    gram: np.ndarray
    cross: dict
    z_own: np.ndarray
    z_other: np.ndarray
    residuals: list
    converged: bool
    stats: dict = field(default_factory=dict)
    beta_off: np.ndarray | None = None

    @property
    def M(self) -> int:
        return len(self.t_grid) - 1

    @property
    def n_features(self) -> int:
        return self.beta_y.shape[1]

    def residuals_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "lambda", "residual"])
        for it, lam, res in self.residuals:
            w.writerow([it, repr(float(lam)), repr(float(res))])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "mean_Ydiag", "mean_control", "clearing_residual"])
        s = self.stats
        for row in zip(self.t_grid, s["mean_Ydiag"], s["mean_control"], s["clearing_residual"]):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


class _Pass:
    """One forward sweep; accumulates regression moments and summaries."""

    def __init__(self, p, cfg, seed, dt, M, lags, weights, n_blocks, block_edges):
        self.p, self.cfg, self.seed = p, cfg, seed
        self.dt, self.M = dt, M
        self.lags, self.weights = lags, weights
        self.n_blocks, self.block_edges = n_blocks, block_edges
        # lags beyond the horizon never reach back into [0, T]
        self.fwd_lags = [(int(n), w) for n, w in zip(lags, weights) if n <= M]
        self.n_max = int(max(max(n for n, _ in self.fwd_lags),
                             block_edges[-1] if n_blocks else 0, 1))

    def noise(self, k: int, n_paths: int) -> np.ndarray:
        """Increments for step ``k`` laid out (bank, path); path prefixes are stable."""
        g = rng.generator(self.seed, rng.STREAM_FABSDE, k)
        dw = g.standard_normal((self.p.n_players, self.cfg.n_paths))
        return dw[:, :n_paths] * math.sqrt(self.dt)

    def features(self, xc, cum_ring, k):
        cols = [xc.reshape(-1)]
        for b in range(self.n_blocks):
            L = len(cum_ring)
            lo, hi = self.block_edges[b], self.block_edges[b + 1]
            # own controls integrated over lags [lo, hi) steps back
            if k - lo <= 0:
                cols.append(np.zeros(xc.size))
                continue
            window = cum_ring[(k - lo) % L]
            if k - hi >= 0:
                window = window - cum_ring[(k - hi) % L]
            cols.append(window.reshape(-1))
        return np.stack(cols, axis=1)

    def run(self, beta_tilde, lam, *, n_paths=None, record=False, moments=True):
        """Forward sweep with controls ``alpha = -lam F beta_tilde - q X^c``.

        Work arrays are laid out (bank, path) so cross-sectional sums are
        contiguous; recorded paths are returned as (path, time, bank).
        """
        p, dt, M = self.p, self.dt, self.M
        n_paths = self.cfg.n_paths if n_paths is None else n_paths
        N = p.n_players
        xc = np.repeat((p.xi - p.xi.mean())[:, None], n_paths, axis=1)
        wbar = np.zeros(n_paths)
        L = self.n_max + 1
        alpha_ring = np.zeros((L, N, n_paths))
        cum_ring = np.zeros((L, N, n_paths)) if self.n_blocks else None
        feat_ring = [None] * L
        nf = 1 + self.n_blocks
        pos_lags = sorted({1, *[n for n, _ in self.fwd_lags if n > 0]})
        out = {
            "mean_control": np.zeros(M + 1),
            "clearing_residual": np.zeros(M + 1),
        }
        if moments:
            out["gram"] = np.zeros((M + 1, nf, nf))
            out["cross"] = {n: np.zeros((M + 1, nf, nf)) for n in pos_lags}
            out["zw_own"] = np.zeros((M, nf))
            out["zw_other"] = np.zeros((M, nf))
            out["w_own2"] = np.zeros(M)
            out["w_other2"] = np.zeros(M)
            out["feat_mean"] = np.zeros((M + 1, nf))
            out["xs_mean_sup"] = np.zeros((M + 1, nf))
        if record:
            for key in ("Xc", "alpha", "Ytilde"):
                out[key] = np.empty((M + 1, N, n_paths))
            out["Xbar"] = np.empty((M + 1, n_paths))
            out["features"] = np.empty((M + 1, N * n_paths, nf))
        prev_dw = None
        for k in range(M + 1):
            F = self.features(xc, cum_ring, k)
            if moments:
                out["gram"][k] = F.T @ F
                out["feat_mean"][k] = F.mean(axis=0)
                xs_mean = F.reshape(N, n_paths, nf).sum(axis=0) / N
                out["xs_mean_sup"][k] = np.abs(xs_mean).max(axis=0)
                for n in pos_lags:
                    if k - n >= 0:
                        out["cross"][n][k - n] = feat_ring[(k - n) % L].T @ F
                if prev_dw is not None:
                    own, other = prev_dw
                    out["zw_own"][k - 1] = F.T @ own
                    out["zw_other"][k - 1] = F.T @ other
                feat_ring[k % L] = F
            ytil = (F @ beta_tilde[k]).reshape(N, n_paths)
            alpha = -lam * ytil - p.q * xc
            out["mean_control"][k] = alpha.mean()
            amax = np.abs(alpha).max(axis=0)
            ratio = np.abs(alpha.sum(axis=0)) / np.where(amax > 0, amax, 1.0)
            out["clearing_residual"][k] = float(ratio.max())
            if record:
                out["Xc"][k] = xc
                out["alpha"][k] = alpha
                out["Ytilde"][k] = ytil
                out["Xbar"][k] = p.xi.mean() + p.sigma * wbar / N
                out["features"][k] = F
            if k == M:
                break
            alpha_ring[k % L] = alpha
            drift = np.zeros_like(xc)
            for n, w in self.fwd_lags:
                if k - n >= 0:
                    drift += w * alpha_ring[(k - n) % L]
            dW = self.noise(k, n_paths)
            wsum = dW.sum(axis=0)
            wbar += wsum
            xc = xc + drift * dt + p.sigma * (dW - wsum / N)
            if cum_ring is not None:
                cum_ring[(k + 1) % L] = cum_ring[k % L] + alpha * dt
            if moments:
                own = dW.reshape(-1)
                # regressing on the sum of the other banks' increments gives the
                # common coefficient Z^{i,i,j}, j != i
                other = (wsum - dW).reshape(-1)
                prev_dw = (own, other)
                out["w_own2"][k] = own @ own
                out["w_other2"][k] = other @ other
            if not np.all(np.abs(xc) <= 1e9):
                raise NumericalError("UNSTABLE", f"|X^c| exceeded 1e9 at step {k}")
        if record:
            for key in ("Xc", "alpha", "Ytilde"):
                out[key] = out[key].transpose(2, 0, 1)
            out["Xbar"] = out["Xbar"].T
        return out


def _projector(G, k, allow_singular):
    if k >= 1 and not np.any(G) and not allow_singular:
        raise NumericalError("REGRESSION_SINGULAR", f"all regression features vanish at step {k}")
    return np.linalg.pinv(G, rcond=RCOND, hermitian=True)


def _backward(p, dt, M, lags, weights, mom, lam, allow_singular):
    """Regression stepping of the adjoint from Y_T; returns coefficient arrays."""
    nf = mom["gram"].shape[1]
    a1, q = p.a1, p.q
    e0 = np.zeros(nf)
    e0[0] = 1.0
    w0 = float(sum(w for n, w in zip(lags, weights) if n == 0))
    pos = [(int(n), w) for n, w in zip(lags, weights) if n > 0]
    by = np.zeros((M + 1, nf))
    bt = np.zeros((M + 1, nf))
    antic = {n: np.zeros((M + 1, nf)) for n, _ in pos}
    by[M] = p.c * a1 * e0
    bt[M] = w0 * by[M]
    for k in range(M - 1, -1, -1):
        Gi = _projector(mom["gram"][k], k, allow_singular)
        c1 = Gi @ (mom["cross"][1][k] @ by[k + 1])
        cs = np.zeros(nf)
        for n, w in pos:
            if k + n <= M and n in mom["cross"]:
                ca = Gi @ (mom["cross"][n][k] @ by[k + n])
                antic[n][k] = ca
                cs += w * ca
        by[k] = (c1 - dt * a1 * (q * lam * cs + (q * q - p.epsilon) * e0)) / (1 + dt * a1 * q * lam * w0)
        bt[k] = w0 * by[k] + cs
    return by, bt, antic


def _rel_change(gram, new, old):
    d = new - old
    num = np.einsum("kf,kfg,kg->", d, gram, d)
    den = np.einsum("kf,kfg,kg->", new, gram, new)
    return math.sqrt(num / den) if den > 0 else math.sqrt(num)


def _setup(p: GameParams, cfg: FabsdeConfig):
    validate_params(p, allow_zero_sigma=True)
    dt, M, m = time_grid(p.horizon, cfg.dt, p.delay)
    lags, weights = _lag_structure(p, dt)
    n_blocks = _history_blocks(cfg.basis)
    if n_blocks and m == 0:
        raise ValidationError("BAD_CONFIG", "history basis needs a positive delay")
    edges = np.round(np.linspace(0, m, n_blocks + 1)).astype(int) if n_blocks else np.zeros(1, int)
    if n_blocks and np.any(np.diff(edges) < 1):
        raise ValidationError("BAD_CONFIG", "more history blocks than lag steps")
    return dt, M, lags, weights, n_blocks, edges


def solve_fabsde(p: GameParams, cfg: FabsdeConfig, seed: int) -> FabsdeSolution:
    """Damped Picard iteration, optionally along homotopy stages ``lam = j / H``."""
    seed = rng.check_seed(seed)
    dt, M, lags, weights, n_blocks, edges = _setup(p, cfg)
    sweep = _Pass(p, cfg, seed, dt, M, lags, weights, n_blocks, edges)
    nf = 1 + n_blocks
    bt = np.zeros((M + 1, nf))
    history = []
    it = 0
    mom = by = antic = None
    converged = False
    for stage in range(1, cfg.homotopy_steps + 1):
        lam = stage / cfg.homotopy_steps
        damping = cfg.damping
        prev = math.inf
        converged = False
        for _ in range(cfg.n_picard):
            it += 1
            mom = sweep.run(bt, lam)
            by, bt_new, antic = _backward(p, dt, M, lags, weights, mom, lam, cfg.allow_singular)
            res = _rel_change(mom["gram"], bt_new, bt)
            history.append((it, lam, res))
            if res > prev:
                damping = max(damping / 2, 1 / 64)
            prev = res
            if res <= cfg.picard_tol:
                bt = bt_new
                converged = True
                break
            bt = bt + damping * (bt_new - bt)
        if not converged:
            break
    sol = FabsdeSolution(
        params=p, cfg=cfg, seed=seed, dt=dt, t_grid=np.arange(M + 1) * dt,
        lags=lags, weights=weights, n_blocks=n_blocks, block_edges=edges,
        beta_y=by, beta_tilde=bt, anticipation_coeffs=antic,
        gram=mom["gram"], cross=mom["cross"],
        z_own=_z_coeffs(mom["zw_own"], mom["w_own2"], by),
        z_other=_z_coeffs(mom["zw_other"], mom["w_other2"], by),
        residuals=history, converged=converged,
        stats={"mean_Ydiag": np.einsum("kf,kf->k", mom["feat_mean"], by),
               "mean_control": mom["mean_control"],
               "clearing_residual": mom["clearing_residual"],
               # bound on sup over paths and times of the cross-sectional mean of Y^{i,i}
               "ybar_sup": float(np.max(np.einsum("kf,kf->k", mom["xs_mean_sup"], np.abs(by))))},
    )
    if not converged:
        raise NoConvergence(
            f"Picard residual {history[-1][2]:.3e} above tol {cfg.picard_tol:g} "
            f"after {cfg.n_picard} iterations at lambda={history[-1][1]:g}",
            history, sol)
    return sol


def _z_coeffs(zw, w2, by):
    # Z_k ~ E[Y_{k+1} dW_k] / E[dW_k^2], pooled, with Y_{k+1} = F_{k+1} beta_{k+1}
    num = np.einsum("kf,kf->k", zw, by[1:])
    return np.divide(num, w2, out=np.zeros_like(num), where=w2 > 0)


def anticipation_check(sol: FabsdeSolution) -> float:
    """RMS over in-sample rows of fresh projection minus stored ``Ytil``.

    Each ``E[Y_{k+n} | F_k]`` is re-projected from the stored Gram matrices
    and combined with the lag weights; the result is compared with
    ``beta_tilde``.
    """
    M = sol.M
    rows = sol.params.n_players * sol.cfg.n_paths
    w0 = float(sum(w for n, w in zip(sol.lags, sol.weights) if n == 0))
    worst = 0.0
    for k in range(M):
        Gi = np.linalg.pinv(sol.gram[k], rcond=RCOND, hermitian=True)
        fresh = w0 * sol.beta_y[k]
        for n, w in zip(sol.lags, sol.weights):
            n = int(n)
            if 0 < n and k + n <= M:
                fresh = fresh + w * (Gi @ (sol.cross[n][k] @ sol.beta_y[k + n]))
        d = fresh - sol.beta_tilde[k]
        worst = max(worst, math.sqrt(max(float(d @ sol.gram[k] @ d), 0.0) / rows))
    return worst


def replay(sol: FabsdeSolution, n_paths: int | None = None) -> dict:
    """Re-simulate the first ``n_paths`` paths with the final coefficients.

    Returns arrays over (path, time, bank): ``X``, ``Xc``, ``Ydiag`` (extended
    with zeros on (T, T + max lag]), ``Ytilde``, ``alpha``, and ``Yoff`` when
    off-diagonal coefficients are present (``Y^{i,j}``, identical for all
    ``j != i``).
    """
    p = sol.params
    n_paths = sol.cfg.n_paths if n_paths is None else min(n_paths, sol.cfg.n_paths)
    sweep = _Pass(p, sol.cfg, sol.seed, sol.dt, sol.M, sol.lags, sol.weights,
                  sol.n_blocks, sol.block_edges)
    out = sweep.run(sol.beta_tilde, 1.0, n_paths=n_paths, record=True, moments=False)
    N, M = p.n_players, sol.M
    F = out.pop("features")
    extra = int(max(sol.lags.max(), 0))
    ydiag = np.zeros((n_paths, M + 1 + extra, N))
    ydiag[:, :M + 1] = np.einsum("krf,kf->kr", F, sol.beta_y).reshape(M + 1, N, n_paths).transpose(2, 0, 1)
    res = {
        "t_grid": sol.t_grid,
        "Xc": out["Xc"],
        "X": out["Xc"] + out["Xbar"][:, :, None],
        "Ydiag": ydiag,
        "Ytilde": out["Ytilde"],
        "alpha": out["alpha"],
    }
    if sol.beta_off is not None:
        res["Yoff"] = np.einsum("krf,kf->kr", F, sol.beta_off).reshape(M + 1, N, n_paths).transpose(2, 0, 1)
    return res


def openloop_controls(sol: FabsdeSolution, n_paths: int | None = None) -> np.ndarray:
    """Controls ``alpha^i = -Ytil^{i,i} + q (Xbar - X^i)`` on replayed paths."""
    if not sol.converged:
        raise NumericalError("NOT_CONVERGED", "solution did not converge")
    return replay(sol, n_paths)["alpha"]


def solve_offdiagonal(sol: FabsdeSolution, p: GameParams | None = None,
                      cfg: FabsdeConfig | None = None) -> np.ndarray:
    """Coefficients of ``Y^{i,j}``, ``j != i``, by the same regression stepping.

    With X frozen the equation is linear with driver
    ``-(1/N) [q Ytil^{i,i} + (q^2 - eps) X^{i,c}]`` and terminal value
    ``-(c/N) X^{i,c}_T``. The result is stored in ``sol.beta_off``.
    """
    if not sol.converged:
        raise NumericalError("NOT_CONVERGED", "solution did not converge")
    p = sol.params if p is None else p
    cfg = sol.cfg if cfg is None else cfg
    M, dt, nf = sol.M, sol.dt, sol.n_features
    e0 = np.zeros(nf)
    e0[0] = 1.0
    bo = np.zeros((M + 1, nf))
    bo[M] = -(p.c / p.n_players) * e0
    for k in range(M - 1, -1, -1):
        Gi = _projector(sol.gram[k], k, cfg.allow_singular)
        c1 = Gi @ (sol.cross[1][k] @ bo[k + 1])
        bo[k] = c1 + dt / p.n_players * (p.q * sol.beta_tilde[k] + (p.q**2 - p.epsilon) * e0)
    sol.beta_off = bo
    return bo
