"""Model definition for the N-bank lending game with delayed repayment.

Bank ``i`` holds log-monetary reserves ``X^i`` driven by

    dX^i_t = (alpha^i_t - alpha^i_{t-tau}) dt + sigma dW^i_t,

and pays the running cost ``f_i`` and terminal cost ``g_i`` below. Everything
here is a pure function of its inputs.
"""
from __future__ import annotations

import configparser
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


class GameLabError(Exception):
    """Base error; ``code`` is a stable machine-readable identifier."""

    exit_status = 1

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


class ValidationError(GameLabError):
    exit_status = 1


class NumericalError(GameLabError):
    exit_status = 2


class NoConvergence(NumericalError):
    """Raised by iterative solvers; ``history`` holds the residual trail."""

    def __init__(self, message: str, history=(), solution=None):
        super().__init__("NO_CONVERGENCE", message)
        self.history = list(history)
        self.solution = solution


@dataclass(frozen=True)
class GameParams:
    n_players: int = 10
    sigma: float = 1.0
    q: float = 1.0
    epsilon: float = 2.0
    c: float = 0.0
    horizon: float = 1.0
    delay: float = 0.25
    initial_reserves: tuple = ()
    # None means the repayment measure delta_0 - delta_tau
    delay_measure: tuple | None = None

    def __post_init__(self):
        xi = tuple(float(v) for v in self.initial_reserves)
        if not xi:
            xi = (0.0,) * int(self.n_players)
        object.__setattr__(self, "initial_reserves", xi)
        if self.delay_measure is not None:
            theta = tuple((float(lag), float(w)) for lag, w in self.delay_measure)
            object.__setattr__(self, "delay_measure", theta)

    @property
    def xi(self) -> np.ndarray:
        return np.asarray(self.initial_reserves, dtype=float)

    @property
    def theta(self) -> tuple:
        if self.delay_measure is None:
            return ((0.0, 1.0), (float(self.delay), -1.0))
        return self.delay_measure

    @property
    def has_default_measure(self) -> bool:
        if self.delay_measure is None:
            return True
        atoms = {}
        for lag, w in self.delay_measure:
            atoms[lag] = atoms.get(lag, 0.0) + w
        return atoms == {0.0: 1.0, float(self.delay): -1.0}

    @property
    def a1(self) -> float:
        """1 - 1/N."""
        return 1.0 - 1.0 / self.n_players

    @property
    def a2(self) -> float:
        """1 - 1/N^2."""
        return 1.0 - 1.0 / self.n_players**2

    def with_(self, **changes) -> "GameParams":
        if "n_players" in changes and "initial_reserves" not in changes:
            n = changes["n_players"]
            if len(self.initial_reserves) != n:
                changes["initial_reserves"] = ()
        return replace(self, **changes)


@dataclass(frozen=True)
class SystemicRiskQuery:
    default_level: float = -0.7


def validate_params(p: GameParams, *, allow_convexity_boundary: bool = False,
                    standing_condition: bool = True,
                    allow_zero_sigma: bool = False) -> GameParams:
    """Check the model invariants and return ``p`` unchanged.

    ``allow_convexity_boundary`` accepts ``q**2 == epsilon`` with a warning
    (a useful analytic test point for the Riccati solver). The standing
    condition ``q^2 (1 - 1/(2N))^2 <= epsilon (1 - 1/N)`` is only needed by
    the forward/anticipated-backward machinery and can be switched off.
    ``allow_zero_sigma`` admits the noiseless limit, which the numerical
    engines handle but which is not a valid model.
    """
    sigma_ok = p.sigma >= 0 if allow_zero_sigma else p.sigma > 0
    if not (sigma_ok and p.epsilon > 0 and p.horizon > 0):
        raise ValidationError("NONPOSITIVE", "sigma, epsilon and horizon must be > 0")
    if p.q < 0 or p.c < 0:
        raise ValidationError("NONPOSITIVE", "q and c must be >= 0")
    if int(p.n_players) != p.n_players or p.n_players < 2:
        raise ValidationError("DEGENERATE_GAME", f"need N >= 2, got {p.n_players}")
    if len(p.initial_reserves) != p.n_players:
        raise ValidationError(
            "BAD_RESERVES",
            f"{len(p.initial_reserves)} initial reserves for {p.n_players} players")
    if not all(math.isfinite(v) for v in p.initial_reserves):
        raise ValidationError("BAD_RESERVES", "initial reserves must be finite")
    if p.delay < 0 or not math.isfinite(p.delay):
        raise ValidationError("BAD_DELAY", f"negative delay {p.delay}")
    for lag, _ in p.theta:
        if lag < 0 or lag > p.delay:
            raise ValidationError("BAD_DELAY", f"lag {lag} outside [0, {p.delay}]")

    q2 = p.q**2
    if q2 > p.epsilon or (q2 == p.epsilon and not allow_convexity_boundary):
        raise ValidationError("CONVEXITY_VIOLATED", f"q^2={q2} >= epsilon={p.epsilon}")
    if q2 == p.epsilon:
        warnings.warn("q^2 == epsilon: running cost is only weakly convex", stacklevel=2)
    if standing_condition:
        n = p.n_players
        if q2 * (1 - 1 / (2 * n)) ** 2 > p.epsilon * (1 - 1 / n):
            raise ValidationError(
                "STANDING_CONDITION_VIOLATED",
                "q^2 (1 - 1/2N)^2 > epsilon (1 - 1/N); increase N or epsilon")
    return p


def _spread(x, i):
    x = np.asarray(x, dtype=float)
    return x.mean(axis=-1) - x[..., i]


def running_cost(p: GameParams, x, i: int, a):
    """f_i(x, a) = a^2/2 - q a (xbar - x^i) + (epsilon/2) (xbar - x^i)^2."""
    if not 0 <= i < p.n_players:
        raise IndexError(f"player index {i} out of range")
    y = _spread(x, i)
    return 0.5 * a * a - p.q * a * y + 0.5 * p.epsilon * y * y


def terminal_cost(p: GameParams, x, i: int):
    if not 0 <= i < p.n_players:
        raise IndexError(f"player index {i} out of range")
    y = _spread(x, i)
    return 0.5 * p.c * y * y


def hamiltonian(p: GameParams, x, i: int, y_row, alpha) -> float:
    """H^i(x, y^i, alpha) = sum_k alpha^k y^{i,k} + f_i(x, alpha^i)."""
    alpha = np.asarray(alpha, dtype=float)
    y_row = np.asarray(y_row, dtype=float)
    return float(alpha @ y_row + running_cost(p, x, i, alpha[i]))


def pointwise_minimizer(p: GameParams, x, i: int, y):
    """Root of d/da f_i(x, a) = -y, i.e. a = -y + q (xbar - x^i)."""
    return -y + p.q * _spread(x, i)


def time_grid(horizon: float, dt: float, delay: float | None = None,
              max_growth: int = 64) -> tuple[float, int, int]:
    """Return ``(dt_used, M, m)`` with ``M * dt_used == horizon``.

    Without ``delay`` the step is shrunk to ``horizon / ceil(horizon / dt)``.
    With a positive ``delay`` the step must also divide the delay
    (``m * dt_used == delay``); it is lowered to the largest common divisor
    not exceeding ``dt``. ``m`` is 0 when no delay is given.
    """
    if dt <= 0:
        raise ValidationError("NONPOSITIVE", f"dt must be > 0, got {dt}")
    if not delay:
        M = max(1, math.ceil(horizon / dt - 1e-9))
        return horizon / M, M, 0
    m0 = max(1, math.ceil(delay / dt - 1e-9))
    for m in range(m0, m0 * max_growth + 1):
        h = delay / m
        M_real = horizon / h
        M = round(M_real)
        if M >= 1 and abs(M_real - M) <= 1e-9 * max(1.0, M_real):
            return horizon / M, M, m
    raise ValidationError(
        "GRID_MISMATCH", f"no step <= {dt} divides both T={horizon} and tau={delay}")


CONFIG_KEYS = ("n_players", "sigma", "q", "epsilon", "c", "horizon", "delay",
               "initial_reserves", "delay_measure")


def _parse_measure(text: str, delay: float) -> tuple:
    atoms = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        lag, _, w = chunk.partition(":")
        lag = lag.strip()
        lag_val = delay if lag in ("tau", "<delay>") else float(lag)
        atoms.append((lag_val, float(w)))
    return tuple(atoms)


def params_from_mapping(values: dict) -> GameParams:
    unknown = set(values) - set(CONFIG_KEYS)
    if unknown:
        raise ValidationError("UNKNOWN_KEY", ", ".join(sorted(unknown)))
    kw = {}
    try:
        for key in ("sigma", "q", "epsilon", "c", "horizon", "delay"):
            if key in values:
                kw[key] = float(values[key])
        if "n_players" in values:
            kw["n_players"] = int(values["n_players"])
        if "initial_reserves" in values:
            raw = values["initial_reserves"]
            if isinstance(raw, str):
                raw = [v for v in raw.replace(" ", "").split(",") if v]
            kw["initial_reserves"] = tuple(float(v) for v in raw)
        if "delay_measure" in values:
            raw = values["delay_measure"]
            delay = kw.get("delay", GameParams.delay)
            kw["delay_measure"] = (_parse_measure(raw, delay) if isinstance(raw, str)
                                   else tuple(tuple(a) for a in raw))
    except ValueError as exc:
        raise ValidationError("BAD_CONFIG", str(exc)) from exc
    return GameParams(**kw)


def load_params(path, overrides: dict | None = None) -> GameParams:
    """Read a ``key = value`` parameter file (comments with ``#``)."""
    text = Path(path).read_text()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[params]\n" + text)
    except configparser.Error as exc:
        raise ValidationError("BAD_CONFIG", str(exc)) from exc
    values = dict(cp["params"])
    values.update(overrides or {})
    return params_from_mapping(values)


def dump_params(p: GameParams) -> str:
    lines = [
        f"n_players = {p.n_players}",
        f"sigma = {p.sigma!r}",
        f"q = {p.q!r}",
        f"epsilon = {p.epsilon!r}",
        f"c = {p.c!r}",
        f"horizon = {p.horizon!r}",
        f"delay = {p.delay!r}",
        "initial_reserves = " + ", ".join(repr(v) for v in p.initial_reserves),
        "delay_measure = " + "; ".join(
            f"{lag!r}:{'+' if w >= 0 else ''}{w!r}" for lag, w in p.theta),
    ]
    return "\n".join(lines) + "\n"


def params_dict(p: GameParams) -> dict:
    return {
        "n_players": p.n_players, "sigma": p.sigma, "q": p.q, "epsilon": p.epsilon,
        "c": p.c, "horizon": p.horizon, "delay": p.delay,
        "initial_reserves": list(p.initial_reserves),
        "delay_measure": [list(a) for a in p.theta],
    }
