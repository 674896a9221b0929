import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240613)


def random_dataset(rng, n, k, iv=False, grid=None):
    """Random just-identified dataset; ``grid`` rounds regressors to create ties."""
    from exactqr.model import Dataset

    w = np.column_stack([np.ones(n)] + [rng.random(n) for _ in range(k - 1)])
    if grid:
        w[:, 1:] = np.round(w[:, 1:] * grid) / grid
    y = w @ rng.normal(size=k) + rng.normal(size=n)
    z = None
    if iv:
        z = np.column_stack([np.ones(n)] + [w[:, j] + 0.5 * rng.random(n) for j in range(1, k)])
    return Dataset(y, w, z)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
