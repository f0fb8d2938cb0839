import numpy as np
import pytest
from hypothesis import settings

from palpf.core import TimeGrid, simulate
from palpf.rota import build_rota_model, rota_params

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def rota_default():
    model = build_rota_model()
    params = rota_params()
    return model, params


@pytest.fixture(scope="session")
def rota_short(rota_default):
    """The default model on a 60-week simulated dataset."""
    model, params = rota_default
    _, obs = simulate(model, params, TimeGrid.weekly(60), 7)
    return model, params, obs


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one acceptance line: number, title, pass flag and a detail string."""
    def record(number, title, ok, detail):
        _CRITERIA.append((number, title, bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
