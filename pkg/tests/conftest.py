import pytest

from rotctl.actuation import ActuatorBank
from rotctl.rod import RodParams

# (number, title, passed, detail) appended by the acceptance suite
ACCEPTANCE_LOG = []


@pytest.fixture
def params():
    return RodParams()


@pytest.fixture
def bank():
    return ActuatorBank.antagonistic()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LOG:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_LOG):
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
