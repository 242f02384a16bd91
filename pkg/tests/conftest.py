import random

import pytest

from datashare import tokens


@pytest.fixture(scope="session")
def issuer_keys():
    # 1024-bit keeps unit tests quick; the acceptance suite uses 2048
    return tokens.setup(1024, random.Random(1234))


class FakeClock:
    def __init__(self, t=0.0):
        self.t = t

    def __call__(self):
        return self.t


@pytest.fixture
def fake_clock():
    return FakeClock(40 * 86400.0)


# one line per acceptance criterion, printed at the end of the run
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
