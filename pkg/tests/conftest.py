import numpy as np
import pytest

from psst.world import WorldConfig, generate_world


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training runs (minutes)")


@pytest.fixture(scope="session")
def tiny_world():
    """Small world for fast agent and experiment tests."""
    return generate_world(WorldConfig(values_per_attribute=3, split_sizes=(40, 16, 16), seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance(request):
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(name, ok, detail):
        lines.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
