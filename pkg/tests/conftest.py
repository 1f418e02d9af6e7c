import numpy as np
import pytest

from racegp.harness.config import resolve_config
from racegp.models import NX, Vehicle


@pytest.fixture(scope="session")
def scale_cfg():
    return resolve_config("scale143")


@pytest.fixture(scope="session")
def vehicle(scale_cfg) -> Vehicle:
    return scale_cfg.vehicle


def random_states(rng, n, *, vx=(0.5, 3.0), spread=1.0):
    """Plausible driving states for the 1:43 car."""
    s = np.zeros((n, NX))
    s[:, 0:2] = rng.uniform(-2, 2, (n, 2)) * spread
    s[:, 2] = rng.uniform(-np.pi, np.pi, n)
    s[:, 3] = rng.uniform(*vx, n)
    s[:, 4] = rng.uniform(-0.3, 0.3, n) * spread
    s[:, 5] = rng.uniform(-3, 3, n) * spread
    s[:, 6] = rng.uniform(-0.3, 0.3, n)
    return s


def random_inputs(rng, n):
    return np.column_stack([rng.uniform(-0.1, 1.0, n), rng.uniform(-5, 5, n)])


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for n in sorted(verdicts):
            terminalreporter.write_line(verdicts[n])
