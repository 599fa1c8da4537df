import datetime as dt

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from policyeval.panel import PanelDataset, TreatmentSpec

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

D0 = dt.date(2020, 3, 30)


def days(n, start=D0):
    return [start + dt.timedelta(days=i) for i in range(n)]


@pytest.fixture
def small_spec():
    # pre: Mar 30 - Apr 5, treatment: Apr 6 - Apr 10 (end Apr 8 + lag 2)
    return TreatmentSpec("T", dt.date(2020, 4, 2), dt.date(2020, 4, 6), dt.date(2020, 4, 8), 2)


@pytest.fixture
def small_panel():
    rng = np.random.default_rng(7)
    n = 14
    inc = rng.integers(0, 20, size=(4, n))
    return PanelDataset(["A", "B", "C", "T"], days(n), np.cumsum(inc, axis=1),
                        [1000, 2000, 3000, 4000], ["1", "2", "3", "4"])


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
