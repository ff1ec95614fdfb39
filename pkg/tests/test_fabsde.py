import numpy as np
import pytest

from game_lab.core import GameParams, NoConvergence, NumericalError, ValidationError
from game_lab.fabsde import (FabsdeConfig, anticipation_check, openloop_controls, replay,
                             solve_fabsde, solve_offdiagonal)
from game_lab.riccati import solve_riccati

FAST = FabsdeConfig(dt=0.02, n_paths=4000)


@pytest.fixture(scope="module")
def delayed():
    p = GameParams(n_players=5, delay=0.25, initial_reserves=np.linspace(-1, 1, 5))
    return solve_fabsde(p, FAST, 1)


@pytest.fixture(scope="module")
def long_delay():
    p = GameParams(n_players=5, delay=1.5, initial_reserves=np.linspace(-1, 1, 5))
    return solve_fabsde(p, FAST, 1)


def test_residuals_decrease_and_converge(delayed):
    res = [r for _, _, r in delayed.residuals]
    assert delayed.converged and res[-1] <= FAST.picard_tol
    assert all(b < a for a, b in zip(res, res[1:]))


def test_anticipated_term_is_consistent(delayed):
    assert anticipation_check(delayed) <= 1e-10


def test_average_adjoint_vanishes(delayed):
    assert delayed.stats["ybar_sup"] <= 1e-8
    assert np.max(np.abs(delayed.stats["clearing_residual"])) <= 1e-10


def test_terminal_condition(delayed):
    p = delayed.params
    assert delayed.beta_y[-1, 0] == pytest.approx(p.c * p.a1)
    assert np.all(delayed.beta_tilde[-1, 1:] == 0)


def test_replay_shapes_and_padding(delayed):
    out = replay(delayed, 50)
    M = delayed.M
    assert out["Xc"].shape == (50, M + 1, 5)
    assert out["Ydiag"].shape[1] == M + 1 + int(delayed.lags.max())
    assert np.all(out["Ydiag"][:, M + 1:] == 0)
    assert np.allclose(out["Xc"].sum(axis=2), 0, atol=1e-12)
    alpha = openloop_controls(delayed, 50)
    assert np.allclose(alpha, out["alpha"])
    assert np.allclose(alpha.sum(axis=2), 0, atol=1e-12)


def test_long_delay_matches_riccati(long_delay):
    p = long_delay.params
    phi = solve_riccati(p, long_delay.dt).phi
    assert np.max(np.abs(long_delay.beta_y[:, 0] - p.a1 * phi)) <= 0.01
    out = replay(long_delay, 500)
    law = -(p.q + p.a1 * phi)[None, :, None] * out["Xc"]
    err = np.sqrt(np.mean((out["alpha"] - law) ** 2) / np.mean(law**2))
    assert err <= 0.02


def test_offdiagonal_ratio(delayed):
    bo = solve_offdiagonal(delayed)
    n = delayed.params.n_players
    assert np.allclose(bo, -delayed.beta_y / (n - 1), atol=1e-12)
    assert "Yoff" in replay(delayed, 10)


def test_history_basis_runs():
    p = GameParams(n_players=5, delay=0.25, initial_reserves=np.linspace(-1, 1, 5))
    sol = solve_fabsde(p, FabsdeConfig(dt=0.02, n_paths=3000, basis="history:2"), 2)
    assert sol.converged and sol.n_features == 3
    assert anticipation_check(sol) <= 1e-10


def test_homotopy_reaches_same_solution(delayed):
    # the last stage of every schedule is the target system
    sols = [solve_fabsde(delayed.params, FabsdeConfig(dt=0.02, n_paths=4000, homotopy_steps=h), 1)
            for h in (2, 4)]
    for s in sols:
        assert s.converged and s.residuals[-1][1] == 1.0
        lams = [lam for _, lam, _ in s.residuals]
        assert lams == sorted(lams)
        scale = np.abs(delayed.beta_tilde).max()
        assert np.max(np.abs(s.beta_tilde - delayed.beta_tilde)) <= 1e-4 * scale


def test_zero_noise_singular():
    p = GameParams(n_players=3, sigma=0.0, delay=0.2)
    with pytest.raises(NumericalError) as err:
        solve_fabsde(p, FabsdeConfig(dt=0.05, n_paths=10), 0)
    assert err.value.code == "REGRESSION_SINGULAR"
    sol = solve_fabsde(p, FabsdeConfig(dt=0.05, n_paths=10, allow_singular=True), 0)
    assert np.all(openloop_controls(sol) == 0)


def test_no_convergence_carries_history():
    p = GameParams(n_players=5, delay=0.25, initial_reserves=np.linspace(-1, 1, 5))
    with pytest.raises(NoConvergence) as err:
        solve_fabsde(p, FabsdeConfig(dt=0.05, n_paths=500, n_picard=2, picard_tol=1e-12), 0)
    assert len(err.value.history) == 2
    with pytest.raises(NumericalError):
        openloop_controls(err.value.solution)


def test_config_validation():
    for bad in (dict(damping=0.0), dict(homotopy_steps=0), dict(basis="poly"),
                dict(basis="history:0"), dict(picard_tol=0.0), dict(n_paths=0)):
        with pytest.raises(ValidationError):
            FabsdeConfig(**bad)
    p = GameParams(delay=1 / np.pi)
    with pytest.raises(ValidationError):
        solve_fabsde(p, FabsdeConfig(dt=0.02, n_paths=10), 0)


def test_csv_outputs(delayed):
    assert delayed.residuals_csv().splitlines()[0] == "iter,lambda,residual"
    lines = delayed.summary_csv().splitlines()
    assert lines[0] == "t,mean_Ydiag,mean_control,clearing_residual"
    assert len(lines) == delayed.M + 2
