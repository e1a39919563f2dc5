import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def grid():
    from astgl.simulator import build_grid

    return build_grid()


@pytest.fixture(scope="session")
def tiny_sets(grid):
    """Small balanced A/B/C datasets, shared across modules."""
    from astgl.dataset import GenerationConfig, generate_dataset

    cfg = GenerationConfig(counts={"A": 20, "B": 20, "C": 10}, chunk=64)
    return generate_dataset(grid, cfg, seed=3)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
