import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from eqsino.group import GroupId, aff, se2

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

finite = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)
angles = st.floats(0.0, 2 * np.pi, allow_nan=False, exclude_max=True)


@st.composite
def se2_elements(draw):
    return se2([draw(finite), draw(finite)], draw(angles))


@st.composite
def aff_elements(draw):
    gam = draw(angles)
    sx = draw(st.floats(0.5, 2.0))
    sy = draw(st.floats(0.5, 2.0))
    tau = draw(st.floats(-0.8, 0.8))
    c, s = np.cos(gam), np.sin(gam)
    A = np.array([[c, -s], [s, c]]) @ np.diag([sx, sy]) @ np.array([[1.0, tau], [0.0, 1.0]])
    return aff([draw(finite), draw(finite)], A)


def elements(group):
    return se2_elements() if GroupId(group) is GroupId.SE2 else aff_elements()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = []


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line for an acceptance criterion and return ``ok``."""

    def emit(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
