import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from game_lab.core import GameParams, ValidationError
from game_lab.ekernels import (boundary_residuals, dump_kernels, feedback_law, liquidity_rate,
                               load_kernels, pde_defect, solve_e_system, value_function)


@pytest.fixture(scope="module")
def kern():
    return solve_e_system(GameParams(n_players=10, horizon=1.0, delay=0.25, c=0.4), 0.01,
                          keep_e2=True)


def test_terminal_values(kern):
    p = kern.params
    assert kern.E0[-1] == p.c / 2
    assert np.all(kern.E1[-1] == 0) and np.all(kern.E2_col[-1] == 0) and kern.E3[-1] == 0
    assert np.all(kern.E2(kern.M) == 0)


def test_boundary_refill_exact(kern):
    res = boundary_residuals(kern)
    assert max(res.values()) <= 1e-12


def test_e2_symmetric_bitwise(kern):
    for k in (0, 7, kern.M // 2):
        E2 = kern.E2(k)
        assert np.array_equal(E2, E2.T)


def test_e3_is_integral_of_e0():
    p = GameParams(n_players=4, horizon=1.0, delay=0.5, c=0.0)
    k = solve_e_system(p, 0.01)
    from scipy.integrate import cumulative_trapezoid
    tail = cumulative_trapezoid(k.E0[::-1], dx=k.dt, initial=0)[::-1]
    assert np.allclose(k.E3, p.a1 * p.sigma**2 * tail, rtol=1e-12, atol=1e-14)
    assert k.E3[-1] == 0


def test_grid_refinement_order():
    p = GameParams(n_players=10, horizon=1.0, delay=0.25)
    e = [solve_e_system(p, dt, keep_e2=False).E0[0] for dt in (0.02, 0.01, 0.005)]
    order = np.log2(abs(e[0] - e[1]) / abs(e[1] - e[2]))
    assert order >= 1.0


def test_pde_defect_shrinks():
    p = GameParams(n_players=10, horizon=1.0, delay=0.25)
    d1 = pde_defect(solve_e_system(p, 0.02, keep_e2=True))
    d2 = pde_defect(solve_e_system(p, 0.01, keep_e2=True))
    for key in ("E0", "E1", "E2"):
        assert d1[key] / d2[key] >= 1.8


def test_fixed_point_rerun(kern):
    frozen = (kern.E0 + kern.E1[:, -1], kern.coupling)
    again = solve_e_system(kern.params, kern.dt, coupling=frozen, keep_e2=False)
    for a, b in ((again.E0, kern.E0), (again.E1, kern.E1), (again.E2_col, kern.E2_col),
                 (again.E3, kern.E3)):
        assert np.max(np.abs(a - b)) <= 1e-10


def test_dt_adjusted_and_reported():
    k = solve_e_system(GameParams(delay=0.25, horizon=1.0), 0.004)
    assert k.dt <= 0.004 and k.m * k.dt == pytest.approx(0.25)


def test_errors():
    with pytest.raises(ValidationError) as err:
        solve_e_system(GameParams(delay=0.0), 0.01)
    assert err.value.code == "TAU_ZERO"
    with pytest.raises(ValidationError) as err:
        solve_e_system(GameParams(delay=1 / np.pi), 0.01)
    assert err.value.code == "GRID_MISMATCH"


def test_liquidity_terminal_and_range(kern):
    p = kern.params
    assert liquidity_rate(kern, p.horizon) == pytest.approx(p.c + p.q)
    assert liquidity_rate(kern, 0.0) == pytest.approx(2 * kern.E1[0, -1] + 2 * kern.E0[0] + p.q)
    with pytest.raises(ValidationError) as err:
        liquidity_rate(kern, -0.1)
    assert err.value.code == "OUT_OF_RANGE"


def test_long_delay_reduces_to_scalar_ode():
    p = GameParams(n_players=10, horizon=1.0, delay=1.5, c=0.3)
    k = solve_e_system(p, 0.005, keep_e2=False)
    assert np.all(k.E1[:, -1] == 0)
    rhs = lambda t, e: [2 * p.a2 * e[0] ** 2 + 2 * p.q * e[0] + p.q**2 / 2 - p.epsilon / 2]
    ref = solve_ivp(rhs, [1.0, 0.0], [p.c / 2], rtol=1e-12, atol=1e-14, dense_output=True)
    assert np.max(np.abs(ref.sol(k.t_grid)[0] - k.E0)) <= 1e-5
    law = feedback_law(k)
    assert np.allclose(law.phi_cl, 2 * p.a1 * k.E0 + p.q)
    assert np.allclose(k.liquidity, 2 * k.E0 + p.q)
    # memory weights on lags that reach back into [0, t] vanish
    for idx in range(0, k.M + 1, 20):
        reach = k.s_grid >= -k.t_grid[idx] - 1e-12
        assert np.max(np.abs(law.psi_bar[idx, reach])) == 0.0


def test_feedback_law_terminal_and_support(kern):
    p = kern.params
    law = feedback_law(kern)
    assert law.phi_cl[-1] == pytest.approx(p.a1 * p.c + p.q)
    k = 50
    s = np.array([kern.t_grid[k] - 0.3, kern.t_grid[k] - 0.1, kern.t_grid[k] + 0.01])
    vals = law.psi_bar_at(k, s)
    assert vals[0] == 0.0 and vals[2] == 0.0
    assert law.memory.shape == (kern.M + 1, kern.m)


def test_value_function_examples(kern):
    p = kern.params
    xi = np.array([0.3, -0.2, 0.5, 0.0, 1.0, -1.0, 0.2, 0.1, -0.4, 0.6])
    v0 = value_function(kern, 0.0, xi)
    y = xi.mean() - xi
    assert np.array_equal(v0, kern.E0[0] * y * y + kern.E3[0])
    sym = value_function(kern, 0.5, np.full(10, 0.7), np.zeros((kern.m + 1, 10)))
    assert np.allclose(sym, kern.E3[50])
    hist = np.random.default_rng(0).normal(size=(kern.m + 1, 10))
    vT = value_function(kern, 1.0, xi, hist)
    assert np.allclose(vT, p.c / 2 * y * y)
    shifted = value_function(kern, 0.5, xi + 3.0, hist)
    assert np.allclose(shifted, value_function(kern, 0.5, xi, hist))
    with pytest.raises(ValidationError) as err:
        value_function(kern, 0.5, xi, hist[:5])
    assert err.value.code == "HISTORY_LENGTH"


def test_value_function_short_history_padded(kern):
    xi = np.linspace(-1, 1, 10)
    hist = np.random.default_rng(1).normal(size=(11, 10))
    a = value_function(kern, 0.1, xi, hist)
    b = value_function(kern, 0.1, xi, np.vstack([np.zeros((kern.m - 10, 10)), hist]))
    assert np.allclose(a, b)


def test_value_function_needs_e2_history():
    k = solve_e_system(GameParams(), 0.01, keep_e2=False)
    with pytest.raises(ValueError):
        value_function(k, 0.5, np.zeros(10), np.zeros((k.m + 1, 10)))


def test_binary_dump_roundtrip(kern, tmp_path):
    path = tmp_path / "k.bin"
    dump_kernels(kern, path)
    raw = path.read_bytes()
    assert raw[:4] == b"EKRN" and len(raw) % 8 == 0
    back = load_kernels(path, kern.params)
    assert back.dt == kern.dt
    for name in ("E0", "E1", "E2_col", "E3", "E2_initial", "coupling"):
        assert np.array_equal(getattr(back, name), getattr(kern, name))
    path.write_bytes(raw[:-8])
    with pytest.raises(ValidationError):
        load_kernels(path, kern.params)


def test_csv_header(kern):
    lines = kern.to_csv().splitlines()
    assert lines[0] == "t,E0,E1_at_0,liquidity" and len(lines) == kern.M + 2


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 12), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.sampled_from([0.2, 0.5, 1.0]))
def test_boundaries_hold_for_random_params(n, q_frac, c, tau):
    eps = 2.0
    q = q_frac * np.sqrt(eps * (1 - 1 / n)) / (1 - 1 / (2 * n))
    p = GameParams(n_players=n, q=q, epsilon=eps, c=c, horizon=1.0, delay=tau)
    k = solve_e_system(p, 0.05, keep_e2=True)
    assert max(boundary_residuals(k).values()) <= 1e-12
    assert k.liquidity[-1] == pytest.approx(c + q)
    assert np.all(np.isfinite(k.E0))
