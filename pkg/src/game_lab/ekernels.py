"""Closed-loop kernels E0..E3 of the delayed game and the feedback law.

The value of bank ``i`` at time ``t`` with spread ``y = xbar - x^i`` and
past control spreads ``h_s = abar_s - alpha^i_s`` on ``[t - tau, t]`` is

    V = E0(t) y^2 + 2 y int E1(t, s-t) h_s ds
        + int int E2(t, s-t, r-t) h_s h_r ds dr + E3(t).

Lags ``u = s - t`` live on ``[-tau, 0]``. E1 and E2 are transported along the
unit-slope characteristics of ``d/dt - d/du`` (and ``- d/dv``), so the lag
step equals the time step and every characteristic lands on a node. Nodes
that enter through ``u = -tau`` are refilled from the boundary conditions
``E1(t, -tau) = -E0(t)`` and ``E2(t, u, -tau) = -E1(t, u)``.
"""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import GameParams, ValidationError, time_grid, validate_params

DUMP_MAGIC = b"EKRN"
DUMP_VERSION = 1


def _pack(mat: np.ndarray) -> np.ndarray:
    return mat[np.triu_indices(mat.shape[0])]


def _unpack(packed: np.ndarray, n: int) -> np.ndarray:
    iu = np.triu_indices(n)
    full = np.empty((n, n))
    full[iu] = packed
    full[iu[1], iu[0]] = packed
    return full


@dataclass
class EKernels:
    dt: float
    t_grid: np.ndarray
    s_grid: np.ndarray
    E0: np.ndarray
    E1: np.ndarray
    E2_col: np.ndarray          # E2(t, u, 0) for every t
    E2_initial: np.ndarray      # packed upper triangle of E2(0, ., .)
    E3: np.ndarray
    params: GameParams
    coupling: np.ndarray        # corrector-stage E0 + E1(., 0) per step
    E2_packed: np.ndarray | None = field(default=None, repr=False)

    @property
    def M(self) -> int:
        return len(self.t_grid) - 1

    @property
    def m(self) -> int:
        return len(self.s_grid) - 1

    def E2(self, k: int) -> np.ndarray:
        """Full symmetric E2 slice at time index ``k``."""
        if k == 0:
            return _unpack(self.E2_initial, self.m + 1)
        if self.E2_packed is None:
            raise ValueError("E2 history not kept; solve with keep_e2=True")
        return _unpack(self.E2_packed[k], self.m + 1)

    @property
    def psi(self) -> np.ndarray:
        """E2(t, u, 0) + E1(t, u)."""
        return self.E2_col + self.E1

    @property
    def liquidity(self) -> np.ndarray:
        return 2 * self.E1[:, -1] + 2 * self.E0 + self.params.q

    def index_of(self, t: float) -> int:
        k = int(round(t / self.dt))
        if not (0 <= k <= self.M) or abs(k * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ValidationError("GRID_MISMATCH", f"t={t} is not a node of the kernel grid")
        return k

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "E0", "E1_at_0", "liquidity"])
        for row in zip(self.t_grid, self.E0, self.E1[:, -1], self.liquidity):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def _rhs0(p: GameParams, K):
    return 2 * p.a2 * K * K + 2 * p.q * K + 0.5 * p.q**2 - 0.5 * p.epsilon


def _sweep(p: GameParams, h: float, M: int, m: int, keep_e2: bool, frozen=None):
    """Backward sweep; ``frozen = (K_final, K_corr)`` fixes the coupling."""
    a2, q = p.a2, p.q
    E0 = np.empty(M + 1)
    E1 = np.empty((M + 1, m + 1))
    E2_col = np.empty((M + 1, m + 1))
    coupling = np.empty(M)
    E0[M] = 0.5 * p.c
    E1[M] = 0.0
    E2 = np.zeros((m + 1, m + 1))
    E2_col[M] = 0.0
    packed = np.empty((M + 1, (m + 1) * (m + 2) // 2)) if keep_e2 else None
    if keep_e2:
        packed[M] = 0.0
    E2p = np.empty_like(E2)
    E2n = np.empty_like(E2)

    for k in range(M - 1, -1, -1):
        K1 = frozen[0][k + 1] if frozen is not None else E0[k + 1] + E1[k + 1, m]
        psi1 = E2[:, m] + E1[k + 1]
        r0_1 = _rhs0(p, K1)
        r1_1 = (2 * a2 * K1 + q) * psi1
        r2_1 = (2 * a2) * np.outer(psi1, psi1)

        # predictor: explicit Euler along characteristics
        E0p = E0[k + 1] - h * r0_1
        E1p = np.empty(m + 1)
        E1p[1:] = E1[k + 1, :-1] - h * r1_1[:-1]
        E1p[0] = -E0p
        E2p[1:, 1:] = E2[:-1, :-1] - h * r2_1[:-1, :-1]
        E2p[0, :] = -E1p
        E2p[:, 0] = -E1p

        # corrector: trapezoid with the predicted slice
        Kc = frozen[1][k] if frozen is not None else E0p + E1p[m]
        coupling[k] = Kc
        psic = E2p[:, m] + E1p
        r1_c = (2 * a2 * Kc + q) * psic
        r2_c = (2 * a2) * np.outer(psic, psic)
        E0[k] = E0[k + 1] - 0.5 * h * (r0_1 + _rhs0(p, Kc))
        E1[k, 1:] = E1[k + 1, :-1] - 0.5 * h * (r1_1[:-1] + r1_c[1:])
        E1[k, 0] = -E0[k]
        E2n[1:, 1:] = E2[:-1, :-1] - 0.5 * h * (r2_1[:-1, :-1] + r2_c[1:, 1:])
        E2n[0, :] = -E1[k]
        E2n[:, 0] = -E1[k]
        E2, E2n = E2n, E2
        E2_col[k] = E2[:, m]
        if keep_e2:
            packed[k] = _pack(E2)

    E3 = np.zeros(M + 1)
    incr = 0.5 * h * p.a1 * p.sigma**2 * (E0[:-1] + E0[1:])
    E3[:-1] = np.cumsum(incr[::-1])[::-1]
    return E0, E1, E2_col, _pack(E2), E3, coupling, packed


def solve_e_system(p: GameParams, dt: float, *, keep_e2: bool | None = None,
                   coupling: tuple | None = None) -> EKernels:
    """Solve the kernel system backward from T.

    ``dt`` is lowered if needed so that it divides both T and tau; the step
    actually used is ``EKernels.dt``. ``keep_e2`` stores every E2 slice
    (default: only when that costs less than ~200 MB). ``coupling`` re-runs
    the sweep with ``(E0 + E1(., 0), corrector coupling)`` frozen.
    """
    validate_params(p, allow_zero_sigma=True)
    if p.delay == 0:
        raise ValidationError("TAU_ZERO", "tau = 0 has no lending; use the no-delay path")
    if not p.has_default_measure:
        raise ValidationError("BAD_DELAY", "kernels exist only for the repayment measure")
    h, M, m = time_grid(p.horizon, dt, p.delay)
    if keep_e2 is None:
        keep_e2 = (M + 1) * (m + 1) * (m + 2) * 4 < 200e6
    E0, E1, E2_col, E2_0, E3, coup, packed = _sweep(p, h, M, m, keep_e2, coupling)
    return EKernels(
        dt=h,
        t_grid=np.arange(M + 1) * h,
        s_grid=-p.delay + np.arange(m + 1) * h,
        E0=E0, E1=E1, E2_col=E2_col, E2_initial=E2_0, E3=E3,
        params=p, coupling=coup, E2_packed=packed,
    )


def boundary_residuals(k: EKernels) -> dict:
    """Max violations of the boundary conditions (terminal and u = -tau)."""
    p = k.params
    out = {
        "E0_T": abs(k.E0[-1] - 0.5 * p.c),
        "E1_T": float(np.max(np.abs(k.E1[-1]))),
        "E2_T": float(np.max(np.abs(k.E2_col[-1]))),
        "E3_T": abs(k.E3[-1]),
        "E1_left": float(np.max(np.abs(k.E1[:-1, 0] + k.E0[:-1]))),
    }
    e2_left = 0.0
    for idx in range(k.M) if k.E2_packed is not None else [0]:
        e2_left = max(e2_left, float(np.max(np.abs(k.E2(idx)[:, 0] + k.E1[idx]))))
    out["E2_left"] = e2_left
    if k.E2_packed is not None:
        out["E2_T"] = max(out["E2_T"], float(np.max(np.abs(k.E2_packed[-1]))))
    return out


def pde_defect(k: EKernels) -> dict:
    """Sup-norm trapezoid residuals of the kernel equations along characteristics.

    For E1 at interior node (t, u) this is
    ``(E1(t+dt, u-dt) - E1(t, u))/dt - (R1(t+dt, u-dt) + R1(t, u))/2``,
    evaluated with the final (not predicted) kernels.
    """
    p, h = k.params, k.dt
    K = k.E0 + k.E1[:, -1]
    r0 = _rhs0(p, K)
    d0 = (k.E0[1:] - k.E0[:-1]) / h - 0.5 * (r0[1:] + r0[:-1])
    psi = k.psi
    r1 = (2 * p.a2 * K + p.q)[:, None] * psi
    d1 = (k.E1[1:, :-1] - k.E1[:-1, 1:]) / h - 0.5 * (r1[1:, :-1] + r1[:-1, 1:])
    out = {"E0": float(np.max(np.abs(d0))), "E1": float(np.max(np.abs(d1)))}
    if k.E2_packed is not None:
        worst = 0.0
        nxt = k.E2(k.M)
        for idx in range(k.M - 1, -1, -1):
            cur = k.E2(idx)
            r_next = 2 * p.a2 * np.outer(psi[idx + 1], psi[idx + 1])
            r_cur = 2 * p.a2 * np.outer(psi[idx], psi[idx])
            d2 = (nxt[:-1, :-1] - cur[1:, 1:]) / h - 0.5 * (r_next[:-1, :-1] + r_cur[1:, 1:])
            worst = max(worst, float(np.max(np.abs(d2))))
            nxt = cur
        out["E2"] = worst
    return out


def liquidity_rate(k: EKernels, t: float) -> float:
    """2 E1(t, 0) + 2 E0(t) + q, linear in t between nodes."""
    T = k.t_grid[-1]
    if not (0.0 <= t <= T):
        raise ValidationError("OUT_OF_RANGE", f"t={t} outside [0, {T}]")
    return float(np.interp(t, k.t_grid, k.liquidity))


@dataclass
class FeedbackLaw:
    """Equilibrium feedback

        alpha^i_t = phi_cl(t) (xbar_t - x^i_t)
                    + 2 (1 - 1/N) int psi_bar(t, s) (abar_s - alpha^i_s) ds,

    with ``psi_bar[k, j] = E2(t_k, u_j, 0) + E1(t_k, u_j)`` on lag node
    ``u_j = s_grid[j]``.
    """
    dt: float
    t_grid: np.ndarray
    s_grid: np.ndarray
    phi_cl: np.ndarray
    psi_bar: np.ndarray
    params: GameParams

    @property
    def memory(self) -> np.ndarray:
        """2(1 - 1/N) psi_bar on the lags -tau, ..., -dt (left-endpoint rule)."""
        return np.ascontiguousarray(2 * self.params.a1 * self.psi_bar[:, :-1])

    def psi_bar_at(self, k: int, s: np.ndarray) -> np.ndarray:
        """psi_bar(t_k, s) on absolute times ``s``; zero outside [t - tau, t]."""
        t = self.t_grid[k]
        u = np.asarray(s, dtype=float) - t
        inside = (u >= self.s_grid[0] - 1e-12) & (u <= 1e-12)
        vals = np.interp(u, self.s_grid, self.psi_bar[k])
        return np.where(inside, vals, 0.0)


def feedback_law(k: EKernels) -> FeedbackLaw:
    a1 = k.params.a1
    return FeedbackLaw(
        dt=k.dt, t_grid=k.t_grid, s_grid=k.s_grid,
        phi_cl=2 * a1 * (k.E0 + k.E1[:, -1]) + k.params.q,
        psi_bar=k.psi,
        params=k.params,
    )


def value_function(k: EKernels, t: float, x, past_alpha=None) -> np.ndarray:
    """Values V^i(t, x, alpha_[t)) for every bank.

    ``past_alpha`` has one row per grid time ending at ``t`` (controls of all
    banks, shape ``(rows, N)``); rows before time 0 may be omitted and are
    taken as zero. ``None`` means an all-zero history.
    """
    idx = k.index_of(t)
    m, h = k.m, k.dt
    x = np.asarray(x, dtype=float)
    y = x.mean() - x
    base = k.E0[idx] * y * y + k.E3[idx]
    if past_alpha is None:
        return base
    hist = np.atleast_2d(np.asarray(past_alpha, dtype=float))
    need = min(m, idx) + 1
    if hist.shape[0] < need or hist.shape[1] != len(x):
        raise ValidationError(
            "HISTORY_LENGTH", f"need >= {need} rows of {len(x)} controls, got {hist.shape}")
    if hist.shape[0] >= m + 1:
        hist = hist[-(m + 1):]
    else:
        hist = np.vstack([np.zeros((m + 1 - hist.shape[0], len(x))), hist])
    spread = hist.mean(axis=1, keepdims=True) - hist          # (m+1, N)
    w = np.full(m + 1, h)
    w[0] = w[-1] = 0.5 * h
    ws = w[:, None] * spread
    cross = 2 * y * (k.E1[idx] @ ws)
    quad = np.einsum("jn,jl,ln->n", ws, k.E2(idx), ws)
    return base + cross + quad


def dump_kernels(k: EKernels, path) -> None:
    """Binary dump: 16-byte header (magic, version, M, m) then float64 blocks."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", DUMP_MAGIC, DUMP_VERSION, k.M, k.m))
        np.asarray([k.dt], dtype="<f8").tofile(fh)
        for arr in (k.E0, k.E3, k.E1, k.E2_col, k.E2_initial, k.coupling):
            np.ascontiguousarray(arr, dtype="<f8").tofile(fh)


def load_kernels(path, params: GameParams) -> EKernels:
    raw = Path(path).read_bytes()
    magic, version, M, m = struct.unpack("<4sIII", raw[:16])
    if magic != DUMP_MAGIC or version != DUMP_VERSION:
        raise ValidationError("BAD_DUMP", f"unrecognised kernel dump {path}")
    data = np.frombuffer(raw[16:], dtype="<f8")
    sizes = [1, M + 1, M + 1, (M + 1) * (m + 1), (M + 1) * (m + 1),
             (m + 1) * (m + 2) // 2, M]
    if data.size != sum(sizes):
        raise ValidationError("BAD_DUMP", "truncated kernel dump")
    parts, pos = [], 0
    for n in sizes:
        parts.append(data[pos:pos + n].copy())
        pos += n
    dt = float(parts[0][0])
    return EKernels(
        dt=dt, t_grid=np.arange(M + 1) * dt, s_grid=-m * dt + np.arange(m + 1) * dt,
        E0=parts[1], E3=parts[2], E1=parts[3].reshape(M + 1, m + 1),
        E2_col=parts[4].reshape(M + 1, m + 1), E2_initial=parts[5],
        params=params, coupling=parts[6],
    )
