"""Deviation test of the closed-loop equilibrium.

For a bank ``i`` that deviates while the others keep the equilibrium law,

    J^i(deviation) - V^i(0) = E int_0^T 1/2 (alpha^i_t - a*_t)^2 dt,

where ``a*_t`` is the equilibrium feedback formula for bank ``i`` evaluated
on the deviated trajectory (its own actual control history included).
Both sides are estimated from the same paths.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .core import GameParams, ValidationError, time_grid, validate_params
from .ekernels import EKernels, feedback_law, value_function
from .simulate import DEV_CODES, mean_se, run_paths


@dataclass(frozen=True)
class DeviationSpec:
    """``constant_shift``: a* + magnitude; ``scaled_feedback``: magnitude * a*;
    ``custom_table``: the control path ``table`` on the time grid."""
    player: int = 0
    kind: str = "constant_shift"
    magnitude: float = 0.0
    table: tuple | None = None

    def __post_init__(self):
        if self.kind not in DEV_CODES:
            raise ValidationError("BAD_DEVIATION", f"unknown deviation kind {self.kind!r}")
        if not math.isfinite(self.magnitude):
            raise ValidationError("BAD_DEVIATION", "magnitude must be finite")


@dataclass
class NashGapResult:
    deviation: DeviationSpec
    value: float              # V^i(0, xi, empty history)
    gap: float                # mean J_dev - V
    gap_se: float
    predicted: float          # mean 1/2 int (alpha - a*)^2
    predicted_se: float
    combined_se: float        # SE of the per-path difference (J_dev - V) - predicted
    crn_diff: float           # mean J_dev - J_eq on the same noise
    crn_diff_se: float
    eq_cost: float            # mean J_eq
    eq_cost_se: float

    @property
    def ratio(self) -> float:
        return self.gap / self.predicted if self.predicted != 0 else float("nan")

    @property
    def identity_error(self) -> float:
        return self.gap - self.predicted


def nash_gap(p: GameParams, k: EKernels, dev: DeviationSpec, dt: float, n_paths: int,
             seed: int, *, threads: int = 0) -> NashGapResult:
    """Estimate the deviation gap and the predicted square integral."""
    validate_params(p, allow_zero_sigma=True)
    h, M, m = time_grid(p.horizon, dt, p.delay)
    if M != k.M or m != k.m or abs(h - k.dt) > 1e-12:
        raise ValidationError("GRID_MISMATCH", f"kernel step {k.dt} does not match dt={h}")
    if not 0 <= dev.player < p.n_players:
        raise ValidationError("BAD_DEVIATION", f"player {dev.player} out of range")
    law = feedback_law(k)
    eq, devb = run_paths(p, h, M, m, True, law.phi_cl, law.memory, n_paths, seed,
                         deviations=(None, dev), threads=threads, label="nashgap")
    i = dev.player
    V = float(value_function(k, 0.0, p.xi)[i])
    j_dev = devb.costs[:, i]
    j_eq = eq.costs[:, i]
    pred = devb.deviation_integral
    gap, gap_se = mean_se(j_dev - V)
    predicted, predicted_se = mean_se(pred)
    _, combined_se = mean_se(j_dev - V - pred)
    crn, crn_se = mean_se(j_dev - j_eq)
    eq_mean, eq_se = mean_se(j_eq)
    return NashGapResult(dev, V, gap, gap_se, predicted, predicted_se, combined_se,
                         crn, crn_se, eq_mean, eq_se)


def independent_gap_difference(p: GameParams, k: EKernels, dev: DeviationSpec, n_paths: int,
                               seed_eq: int, seed_dev: int) -> np.ndarray:
    """Per-path ``J_dev - J_eq - predicted`` with the two runs on independent seeds.

    Reference for judging how much the shared noise of ``nash_gap`` helps.
    """
    law = feedback_law(k)
    (eq,) = run_paths(p, k.dt, k.M, k.m, True, law.phi_cl, law.memory, n_paths, seed_eq)
    (devb,) = run_paths(p, k.dt, k.M, k.m, True, law.phi_cl, law.memory, n_paths, seed_dev,
                        deviations=(dev,))
    i = dev.player
    return devb.costs[:, i] - eq.costs[:, i] - devb.deviation_integral


def nashgap_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["deviation_kind", "magnitude", "gap", "gap_se", "predicted",
                "predicted_se", "ratio"])
    for r in results:
        w.writerow([r.deviation.kind, repr(float(r.deviation.magnitude)), repr(r.gap),
                    repr(r.gap_se), repr(r.predicted), repr(r.predicted_se), repr(r.ratio)])
    return buf.getvalue()
