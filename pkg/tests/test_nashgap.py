import numpy as np
import pytest

from game_lab.core import GameParams, ValidationError
from game_lab.ekernels import solve_e_system
from game_lab.nashgap import DeviationSpec, independent_gap_difference, nash_gap, nashgap_csv


@pytest.fixture(scope="module")
def setup():
    p = GameParams(n_players=5, delay=0.25, initial_reserves=np.linspace(-1, 1, 5))
    return p, solve_e_system(p, 0.01, keep_e2=False)


def test_zero_deviation_matches_equilibrium(setup):
    p, k = setup
    r = nash_gap(p, k, DeviationSpec(1, "constant_shift", 0.0), k.dt, 2000, 3)
    assert r.crn_diff == 0.0 and r.predicted == 0.0
    assert abs(r.gap) <= 4 * r.gap_se + 0.02 * abs(r.value)


def test_unit_scaling_is_no_deviation(setup):
    p, k = setup
    r = nash_gap(p, k, DeviationSpec(0, "scaled_feedback", 1.0), k.dt, 500, 3)
    assert r.crn_diff == 0.0 and r.predicted == 0.0


def test_constant_shift_prediction_is_exact(setup):
    # alpha - a* = delta on every step, so the predicted integral is delta^2 T / 2
    p, k = setup
    r = nash_gap(p, k, DeviationSpec(0, "constant_shift", 0.3), k.dt, 500, 3)
    assert r.predicted == pytest.approx(0.5 * 0.09 * p.horizon, rel=1e-12)
    assert r.predicted_se == pytest.approx(0.0, abs=1e-14)


def test_identity_on_common_noise(setup):
    p, k = setup
    for dev in (DeviationSpec(0, "constant_shift", 0.2), DeviationSpec(2, "scaled_feedback", 1.5)):
        r = nash_gap(p, k, dev, k.dt, 4000, 5)
        assert r.gap >= -3 * r.gap_se
        assert abs(r.crn_diff - r.predicted) <= 0.1 * r.predicted + 4 * r.crn_diff_se


def test_custom_table(setup):
    p, k = setup
    table = tuple(np.zeros(k.M + 1))
    r = nash_gap(p, k, DeviationSpec(0, "custom_table", table=table), k.dt, 500, 3)
    assert r.predicted > 0 and r.crn_diff > 0
    with pytest.raises(ValidationError) as err:
        nash_gap(p, k, DeviationSpec(0, "custom_table", table=(0.0, 1.0)), k.dt, 10, 0)
    assert err.value.code == "BAD_DEVIATION"


def test_common_noise_reduces_variance(setup):
    p, k = setup
    dev = DeviationSpec(0, "constant_shift", 0.2)
    r = nash_gap(p, k, dev, k.dt, 2000, 7)
    indep = independent_gap_difference(p, k, dev, 2000, 7, 8)
    assert r.crn_diff_se < indep.std(ddof=1) / np.sqrt(2000) / 10


def test_bad_specs(setup):
    p, k = setup
    with pytest.raises(ValidationError):
        DeviationSpec(0, "random", 0.1)
    with pytest.raises(ValidationError):
        DeviationSpec(0, "constant_shift", float("nan"))
    with pytest.raises(ValidationError):
        nash_gap(p, k, DeviationSpec(9, "constant_shift", 0.1), k.dt, 10, 0)
    with pytest.raises(ValidationError):
        nash_gap(p, k, DeviationSpec(0, "constant_shift", 0.1), 0.005, 10, 0)


def test_csv(setup):
    p, k = setup
    r = nash_gap(p, k, DeviationSpec(0, "constant_shift", 0.2), k.dt, 100, 0)
    lines = nashgap_csv([r]).splitlines()
    assert lines[0] == "deviation_kind,magnitude,gap,gap_se,predicted,predicted_se,ratio"
    assert lines[1].startswith("constant_shift,0.2,")


def test_identity_pins_memory_weight():
    # strong-memory game: the identity holds for the derived weight and fails without the 2(1 - 1/N) factor
    from game_lab.simulate import mean_se, run_paths
    from game_lab.ekernels import feedback_law, value_function
    p = GameParams(n_players=3, delay=1.0, epsilon=6.0, horizon=2.0, initial_reserves=(-2.0, 0.0, 2.0))
    k = solve_e_system(p, 5e-3, keep_e2=False)
    law = feedback_law(k)
    V = value_function(k, 0.0, p.xi)[0]
    dev = DeviationSpec(0, "scaled_feedback", 0.3)
    out = {}
    for name, mem in (("derived", law.memory), ("unscaled", law.memory / (2 * p.a1))):
        (b,) = run_paths(p, k.dt, k.M, k.m, True, law.phi_cl, mem, 20000, 1, deviations=(dev,))
        out[name] = mean_se(b.costs[:, 0] - V - b.deviation_integral)
    assert abs(out["derived"][0]) <= 3 * out["derived"][1]
    assert abs(out["unscaled"][0]) >= 5 * out["unscaled"][1]
