import numpy as np
import pytest

from seatvc import sea_model as sea
from seatvc import simulator as sim


@pytest.fixture(scope="session")
def small_campaign():
    cfg = sim.SimConfig(n_ads=40, horizon_days=40, seed=11)
    records, truth = sim.generate(cfg)
    panel = sea.prepare_panel(records, sea.PrepConfig(day_range=(1, 40)))
    return records, truth, panel


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record and print a one-line verdict for an acceptance criterion."""

    def report(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
