import numpy as np
import pytest

from mmsched.model import cmu_star_ordering, two_class_example, verify_heavy_traffic
from mmsched.policies import cmu_star_policy, dynamic_cmu_policy

# acceptance results collected as (criterion, passed, detail)
ACCEPTANCE_LINES = []


@pytest.fixture
def example():
    return two_class_example(1.0)


@pytest.fixture
def cmu_star(example):
    rep = verify_heavy_traffic(example)
    return cmu_star_policy(cmu_star_ordering(example.costs, rep.mu_star))


@pytest.fixture
def dynamic_cmu(example):
    return dynamic_cmu_policy(example.costs, example.service, 25)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(ACCEPTANCE_LINES, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {crit:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
