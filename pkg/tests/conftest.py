import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ci", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@pytest.fixture(scope="session")
def tiny_world():
    from crossloc import synthbench as sb

    world = sb.generate_world(1, 8)
    return world, sb.generate_runs(world, 2)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_world):
    from crossloc.datamodel import Dataset

    return Dataset.from_runs(tiny_world[1])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting: one pass/fail line per criterion ---------------------

AC_LINES = {}


@pytest.fixture
def ac_report(request):
    """Call ``ac_report(tag, ok, detail)``; the line is echoed now and in the run summary."""

    def report(tag, ok, detail):
        line = f"{tag} {'PASS' if ok else 'FAIL'}: {detail}"
        AC_LINES[tag] = line
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if AC_LINES:
        terminalreporter.section("acceptance criteria")
        for tag in sorted(AC_LINES, key=lambda t: int(t[2:])):
            terminalreporter.write_line(AC_LINES[tag])
