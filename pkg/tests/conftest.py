import numpy as np
import pytest
from hypothesis import settings

from riskdp.instances import two_action_mdp

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def two_action():
    return two_action_mdp()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


class Acceptance:
    """Records one PASS/FAIL line per acceptance criterion."""

    def __init__(self, lines):
        self.lines = lines

    def check(self, number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}: {title}" + \
            (f"  [{detail}]" if detail else "")
        self.lines.append((number, line))
        print(line)
        assert ok, line


@pytest.fixture
def acceptance(request):
    return Acceptance(request.config.stash[_RESULTS])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
