"""No-delay benchmark: open-loop Riccati gain and systemic-risk probability."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .core import (GameParams, NumericalError, SystemicRiskQuery, ValidationError,
                   time_grid, validate_params)

BLOWUP_LEVEL = 1e6


@dataclass
class RiccatiSolution:
    t_grid: np.ndarray
    phi: np.ndarray
    params: GameParams

    @property
    def dt(self) -> float:
        return float(self.t_grid[1] - self.t_grid[0])

    @property
    def gain(self) -> np.ndarray:
        return self.params.q + self.params.a1 * self.phi

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "phi", "gain"])
        for t, ph, g in zip(self.t_grid, self.phi, self.gain):
            w.writerow([repr(float(t)), repr(float(ph)), repr(float(g))])
        return buf.getvalue()


def riccati_rhs(p: GameParams, phi):
    """d(phi)/dt = 2q(1 - 1/2N) phi + (1 - 1/N) phi^2 - (epsilon - q^2)."""
    n = p.n_players
    return 2 * p.q * (1 - 1 / (2 * n)) * phi + (1 - 1 / n) * phi * phi - (p.epsilon - p.q**2)


def solve_riccati(p: GameParams, dt: float) -> RiccatiSolution:
    """Integrate the open-loop Riccati equation backward from phi(T) = c (RK4)."""
    validate_params(p, allow_convexity_boundary=True, standing_condition=False,
                    allow_zero_sigma=True)
    h, M, _ = time_grid(p.horizon, dt)
    t = np.linspace(0.0, p.horizon, M + 1)
    phi = np.empty(M + 1)
    phi[M] = p.c
    y = float(p.c)
    for k in range(M, 0, -1):
        # backward in time: d(phi)/ds = -rhs with s = T - t
        k1 = riccati_rhs(p, y)
        k2 = riccati_rhs(p, y - 0.5 * h * k1)
        k3 = riccati_rhs(p, y - 0.5 * h * k2)
        k4 = riccati_rhs(p, y - h * k3)
        y = y - h * (k1 + 2 * k2 + 2 * k3 + k4) / 6
        if not abs(y) <= BLOWUP_LEVEL:
            raise NumericalError("BLOWUP", f"|phi| exceeded {BLOWUP_LEVEL:g} at t={t[k - 1]:.6g}")
        phi[k - 1] = y
    return RiccatiSolution(t, phi, p)


def ode_defect(sol: RiccatiSolution) -> float:
    """Sup-norm gap between a 4th-order finite-difference derivative and the rhs."""
    phi, h = sol.phi, sol.dt
    if len(phi) < 5:
        raise ValueError("need at least 5 grid nodes")
    d = np.empty_like(phi)
    d[2:-2] = (phi[:-4] - 8 * phi[1:-3] + 8 * phi[3:-1] - phi[4:]) / (12 * h)
    # one-sided 4th-order stencils at the two ends
    d[0] = (-25 * phi[0] + 48 * phi[1] - 36 * phi[2] + 16 * phi[3] - 3 * phi[4]) / (12 * h)
    d[1] = (-3 * phi[0] - 10 * phi[1] + 18 * phi[2] - 6 * phi[3] + phi[4]) / (12 * h)
    d[-1] = (25 * phi[-1] - 48 * phi[-2] + 36 * phi[-3] - 16 * phi[-4] + 3 * phi[-5]) / (12 * h)
    d[-2] = (3 * phi[-1] + 10 * phi[-2] - 18 * phi[-3] + 6 * phi[-4] - phi[-5]) / (12 * h)
    return float(np.max(np.abs(d - riccati_rhs(sol.params, phi))))


def nodelay_feedback_gain(sol: RiccatiSolution, t: float) -> float:
    """Equilibrium gain q + (1 - 1/N) phi_t, linearly interpolated in t."""
    T = sol.t_grid[-1]
    if not (0.0 <= t <= T):
        raise ValidationError("OUT_OF_RANGE", f"t={t} outside [0, {T}]")
    phi_t = float(np.interp(t, sol.t_grid, sol.phi))
    return sol.params.q + sol.params.a1 * phi_t


def std_normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def systemic_prob_closed_form(p: GameParams, query: SystemicRiskQuery) -> float:
    """P(min_{t<=T} (Xbar_t - Xbar_0) <= D) = 2 Phi(D sqrt(N) / (sigma sqrt(T)))."""
    D = query.default_level
    if D > 0:
        raise ValidationError("BAD_LEVEL", f"default level must be <= 0, got {D}")
    z = D * math.sqrt(p.n_players) / (p.sigma * math.sqrt(p.horizon))
    return min(1.0, 2.0 * std_normal_cdf(z))
