import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from onp import problem as pb

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def toy():
    return pb.gen_toy_instance()


@pytest.fixture(scope="session")
def toy_scen(toy):
    return pb.sample_scenarios(toy.elasticity, 100, 0)


@pytest.fixture(scope="session")
def rand16():
    return pb.gen_random_instance(16, seed=1)


@pytest.fixture(scope="session")
def rand16_scen(rand16):
    return pb.sample_scenarios(rand16.elasticity, 100, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, printed after the run.
ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    def report(number, ok, detail):
        line = f"CRITERION {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
