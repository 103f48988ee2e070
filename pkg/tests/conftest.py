import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rangeseq.rangeimg import SensorModel

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def toy_sensor():
    return SensorModel.from_degrees(16, 64, 15, 15, 50)


@pytest.fixture
def hdl64():
    return SensorModel.from_degrees(64, 2048, 3, 25, 85)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def record(request):
    """Log one acceptance line and hand back the verdict for asserting."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def _record(n, ok, detail=""):
        line = f"criterion {n:>2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
