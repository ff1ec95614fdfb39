import numpy as np
import pytest

from game_lab.core import GameParams

ACCEPTANCE_LINES = []


def record_acceptance(number, ok, detail):
    line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def base_params():
    return GameParams()


@pytest.fixture
def small_game():
    """N=5, T=1, tau=0.25 with spread-out initial reserves."""
    return GameParams(n_players=5, delay=0.25, initial_reserves=np.linspace(-1.0, 1.0, 5))
