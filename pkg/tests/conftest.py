import numpy as np
import pytest

from hybridflight.flightdyn import VehicleParams, default_aero_dataset, trim_level_flight


@pytest.fixture(scope="session")
def aero():
    return default_aero_dataset()


@pytest.fixture(scope="session")
def params():
    return VehicleParams()


@pytest.fixture(scope="session")
def trim(aero, params):
    """Trim at alpha = 0.1 rad with eta = 0.1: (state, control)."""
    return trim_level_flight(0.1, params, aero, eta=0.1, x0=[400.0, 0.0, -0.02])


def random_states(rng, n, alpha=(-0.15, 1.0)):
    """In-envelope states away from the cos(beta)/cos(gamma) singularities."""
    out = np.zeros((n, 10))
    out[:, 0] = rng.uniform(150.0, 900.0, n)
    out[:, 1] = rng.uniform(*alpha, n)
    out[:, 2] = rng.uniform(-0.25, 0.25, n)
    out[:, 3] = rng.uniform(-1.0, 1.0, n)
    out[:, 4] = rng.uniform(-0.5, 0.5, n)
    out[:, 5] = rng.uniform(-0.5, 0.5, n)
    out[:, 6] = rng.uniform(-np.pi, np.pi, n)
    out[:, 7] = rng.uniform(-1.0, 1.0, n)
    out[:, 8] = rng.uniform(-np.pi, np.pi, n)
    return out


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion that ran."""
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
